use super::SampleSet;
use crate::diffcore::{DenseMatrix, Rng};
use crate::error::{CoclError, Result};
use crate::losses::LabeledBatch;

/// Endless stream of (ID, auxiliary OOD) mini-batches.
///
/// ID rows are drawn without replacement from a permutation that is redrawn
/// at every epoch boundary; the last batch of an epoch may be short. OOD
/// rows are a fresh uniform draw without replacement for every batch.
pub struct BatchStream<'a> {
    id: &'a SampleSet,
    aux: &'a SampleSet,
    id_batch: usize,
    ood_batch: usize,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

pub fn sample_batches<'a>(
    id: &'a SampleSet,
    aux: &'a SampleSet,
    id_batch: usize,
    ood_batch: usize,
    rng: Rng,
) -> Result<BatchStream<'a>> {
    if id.labels.is_none() {
        return Err(CoclError::validation("ID split needs labels"));
    }
    if id_batch == 0 || id_batch > id.len() {
        return Err(CoclError::validation(format!(
            "ID batch {id_batch} must be in 1..={}",
            id.len()
        )));
    }
    if ood_batch > aux.len() {
        return Err(CoclError::validation(format!(
            "OOD batch {ood_batch} exceeds pool of {}",
            aux.len()
        )));
    }
    Ok(BatchStream {
        id,
        aux,
        id_batch,
        ood_batch,
        rng,
        order: Vec::new(),
        cursor: 0,
    })
}

impl BatchStream<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.id.len().div_ceil(self.id_batch)
    }

    /// Indices into the ID and auxiliary pools for the next step.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        if self.cursor >= self.order.len() {
            self.order = (0..self.id.len()).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + self.id_batch).min(self.order.len());
        let id_idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let ood_idx = self.rng.sample_indices(self.aux.len(), self.ood_batch);
        (id_idx, ood_idx)
    }

    pub fn next_batch(&mut self) -> (LabeledBatch, LabeledBatch) {
        let (id_idx, ood_idx) = self.next_indices();
        let labels = self.id.labels.as_ref().expect("checked at construction");
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let id = LabeledBatch::id(
            self.id.inputs.select_rows(&id_idx),
            id_idx.iter().map(|&i| labels[i]).collect(),
            k,
        )
        .expect("labels come from the pool");
        let ood_inputs: DenseMatrix = self.aux.inputs.select_rows(&ood_idx);
        let ood = LabeledBatch::aux_ood(ood_inputs, k);
        (id, ood)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = (LabeledBatch, LabeledBatch);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
