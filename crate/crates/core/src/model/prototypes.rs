use crate::diffcore::{norm, DenseMatrix, Rng};
use crate::error::{CoclError, Result};

/// One learnable unit-norm prototype per tail class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub m: DenseMatrix,
    pub tail_class_ids: Vec<usize>,
}

impl PrototypeBank {
    pub fn new(m: DenseMatrix, tail_class_ids: Vec<usize>) -> Result<Self> {
        if m.rows() != tail_class_ids.len() {
            return Err(CoclError::shape(format!(
                "{} prototypes for {} tail classes",
                m.rows(),
                tail_class_ids.len()
            )));
        }
        let mut seen = tail_class_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != tail_class_ids.len() {
            return Err(CoclError::validation("duplicate tail class in prototype bank"));
        }
        Ok(Self { m, tail_class_ids })
    }

    /// Empty bank with the given embedding width.
    pub fn empty(embed_dim: usize) -> Self {
        Self {
            m: DenseMatrix::zeros(0, embed_dim),
            tail_class_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tail_class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tail_class_ids.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.m.cols()
    }

    /// Prototype row of a class, if it is a tail class.
    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.tail_class_ids.iter().position(|&c| c == class)
    }

    /// Rescales every row to unit length.
    pub fn normalize_rows(&mut self) {
        for i in 0..self.m.rows() {
            let row = self.m.row_mut(i);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

/// Random unit-norm prototypes for the given tail classes.
pub fn init_prototypes(tail_class_ids: &[usize], embed_dim: usize, rng: &mut Rng) -> Result<PrototypeBank> {
    if tail_class_ids.is_empty() {
        return Err(CoclError::validation("prototype bank needs at least one tail class"));
    }
    let mut data = Vec::with_capacity(tail_class_ids.len() * embed_dim);
    for _ in tail_class_ids {
        data.extend(rng.unit_vector(embed_dim));
    }
    PrototypeBank::new(
        DenseMatrix::new(tail_class_ids.len(), embed_dim, data)?,
        tail_class_ids.to_vec(),
    )
}
