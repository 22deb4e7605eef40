//! OOD-aware tail prototype contrast.
//!
//! For a tail row with embedding `z` and class prototype `m_y`, the per-row
//! loss is
//!
//! ```text
//! -log( exp(z·m_y / t) / (Σ_m exp(z·m / t) + Σ_o exp(z·z_o / t)) )
//! ```
//!
//! where `m` runs over every prototype and `o` over the concurrent auxiliary
//! OOD batch. The value is the mean over tail rows.

use serde::{Deserialize, Serialize};

use crate::diffcore::{dot, DenseMatrix};
use crate::error::{CoclError, Result};
use crate::model::PrototypeBank;

/// Sign convention for the log-ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcplForm {
    /// Negative log-ratio: minimizing pulls rows toward their prototype.
    #[default]
    Negative,
    /// The log-ratio without the leading minus sign. Kept for comparison
    /// runs only; minimizing it pushes rows away from their prototype.
    Literal,
}

#[derive(Debug, Clone)]
pub struct TcplOutput {
    pub value: f64,
    pub tail_grad: DenseMatrix,
    pub bank_grad: DenseMatrix,
    pub ood_grad: DenseMatrix,
}

pub fn tcpl_loss(
    tail_embeddings: &DenseMatrix,
    tail_classes: &[usize],
    bank: &PrototypeBank,
    ood_embeddings: &DenseMatrix,
    temperature: f64,
    form: TcplForm,
) -> Result<TcplOutput> {
    let n = tail_embeddings.rows();
    let d = tail_embeddings.cols();
    if tail_classes.len() != n {
        return Err(CoclError::shape("one class per tail row required"));
    }
    if !(temperature > 0.0) {
        return Err(CoclError::validation("temperature must be positive"));
    }
    let mut out = TcplOutput {
        value: 0.0,
        tail_grad: DenseMatrix::zeros(n, d),
        bank_grad: DenseMatrix::zeros(bank.len(), bank.embed_dim()),
        ood_grad: DenseMatrix::zeros(ood_embeddings.rows(), ood_embeddings.cols()),
    };
    if n == 0 {
        return Ok(out);
    }
    if bank.embed_dim() != d || (ood_embeddings.rows() > 0 && ood_embeddings.cols() != d) {
        return Err(CoclError::shape("embedding widths disagree"));
    }
    let slots: Vec<usize> = tail_classes
        .iter()
        .map(|&c| {
            bank.index_of(c)
                .ok_or_else(|| CoclError::validation(format!("class {c} has no prototype")))
        })
        .collect::<Result<_>>()?;

    let sign = match form {
        TcplForm::Negative => 1.0,
        TcplForm::Literal => -1.0,
    };
    let np = bank.len();
    let no = ood_embeddings.rows();
    let inv_t = 1.0 / temperature;
    // d(mean loss)/d(score) for each score, before the 1/t chain factor
    let scale = sign / n as f64;
    let mut scores = vec![0.0; np + no];
    let mut total = 0.0;
    for (r, &slot) in slots.iter().enumerate() {
        let z = tail_embeddings.row(r);
        for (j, s) in scores.iter_mut().enumerate() {
            let other = if j < np { bank.m.row(j) } else { ood_embeddings.row(j - np) };
            *s = dot(z, other) * inv_t;
        }
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            sum += *s;
        }
        // log-ratio relative to the positive score; ln_1p keeps precision
        // when the positive dominates
        let sp = dot(z, bank.m.row(slot)) * inv_t;
        total += if mx == sp {
            let others: f64 = scores.iter().enumerate().filter(|&(j, _)| j != slot).map(|(_, v)| v).sum();
            others.ln_1p()
        } else {
            (mx - sp) + sum.ln()
        };

        // scores now hold unnormalized weights; w_j = scores[j] / sum
        for j in 0..np + no {
            let coeff = scale * inv_t * (scores[j] / sum - if j == slot { 1.0 } else { 0.0 });
            if coeff == 0.0 {
                continue;
            }
            let other = if j < np { bank.m.row(j) } else { ood_embeddings.row(j - np) };
            for (g, o) in out.tail_grad.row_mut(r).iter_mut().zip(other) {
                *g += coeff * o;
            }
            let target = if j < np { out.bank_grad.row_mut(j) } else { out.ood_grad.row_mut(j - np) };
            for (g, zv) in target.iter_mut().zip(z) {
                *g += coeff * zv;
            }
        }
    }
    out.value = sign * total / n as f64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_grad, relative_error, Rng, FD_STEP};
    use crate::model::init_prototypes;

    fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> DenseMatrix {
        let data: Vec<f64> = (0..n).flat_map(|_| rng.unit_vector(d)).collect();
        DenseMatrix::new(n, d, data).unwrap()
    }

    #[test]
    fn single_prototype_no_ood_is_zero() {
        let bank = init_prototypes(&[4], 3, &mut Rng::new(0)).unwrap();
        let z = unit_rows(&mut Rng::new(1), 2, 3);
        let out = tcpl_loss(&z, &[4, 4], &bank, &DenseMatrix::zeros(0, 3), 0.07, TcplForm::Negative).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn orthogonal_configuration_matches_direct_formula() {
        // z = m_x = e0; other prototype e1; one OOD embedding e2.
        let bank = PrototypeBank::new(
            DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
            vec![8, 9],
        )
        .unwrap();
        let z = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let ood = DenseMatrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let out = tcpl_loss(&z, &[8], &bank, &ood, 0.07, TcplForm::Negative).unwrap();
        // mpmath (50 digits): -log(e^(1/t) / (e^(1/t) + 2)), t = 0.07
        let expected = 1.2497491209558600e-6;
        assert!((out.value - expected).abs() < 1e-18, "{}", out.value);
    }

    #[test]
    fn missing_prototype_is_validation_error() {
        let bank = init_prototypes(&[1], 2, &mut Rng::new(0)).unwrap();
        let z = unit_rows(&mut Rng::new(1), 1, 2);
        let r = tcpl_loss(&z, &[0], &bank, &DenseMatrix::zeros(0, 2), 0.5, TcplForm::Negative);
        assert!(matches!(r, Err(CoclError::Validation(_))));
    }

    #[test]
    fn empty_tail_batch_is_inert() {
        let bank = init_prototypes(&[1, 2], 4, &mut Rng::new(0)).unwrap();
        let ood = unit_rows(&mut Rng::new(1), 3, 4);
        let out = tcpl_loss(&DenseMatrix::zeros(0, 4), &[], &bank, &ood, 0.07, TcplForm::Negative).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.bank_grad.data().iter().chain(out.ood_grad.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn literal_form_is_negation() {
        let mut rng = Rng::new(5);
        let bank = init_prototypes(&[0, 1, 2], 4, &mut rng).unwrap();
        let z = unit_rows(&mut rng, 4, 4);
        let ood = unit_rows(&mut rng, 2, 4);
        let a = tcpl_loss(&z, &[0, 1, 2, 0], &bank, &ood, 0.2, TcplForm::Negative).unwrap();
        let b = tcpl_loss(&z, &[0, 1, 2, 0], &bank, &ood, 0.2, TcplForm::Literal).unwrap();
        assert!((a.value + b.value).abs() < 1e-14);
        assert!(a.value >= 0.0);
    }

    #[test]
    fn gradients_match_fd() {
        let mut rng = Rng::new(6);
        let bank = init_prototypes(&[3, 5, 6], 4, &mut rng).unwrap();
        let z = unit_rows(&mut rng, 5, 4);
        let ood = unit_rows(&mut rng, 3, 4);
        let classes = [3, 6, 6, 5, 3];
        let t = 0.3;
        let out = tcpl_loss(&z, &classes, &bank, &ood, t, TcplForm::Negative).unwrap();
        let (nz, nb) = (z.data().len(), bank.m.data().len());
        let flat: Vec<f64> = [z.data(), bank.m.data(), ood.data()].concat();
        let f = |x: &[f64]| {
            let zz = DenseMatrix::new(5, 4, x[..nz].to_vec()).unwrap();
            let bb = PrototypeBank::new(DenseMatrix::new(3, 4, x[nz..nz + nb].to_vec()).unwrap(), vec![3, 5, 6]).unwrap();
            let oo = DenseMatrix::new(3, 4, x[nz + nb..].to_vec()).unwrap();
            tcpl_loss(&zz, &classes, &bb, &oo, t, TcplForm::Negative).unwrap().value
        };
        let numeric = finite_diff_grad(f, &flat, FD_STEP).unwrap();
        let analytic = [out.tail_grad.data(), out.bank_grad.data(), out.ood_grad.data()].concat();
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}
