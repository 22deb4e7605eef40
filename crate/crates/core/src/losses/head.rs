//! Debiased head-class margin loss.
//!
//! Each auxiliary OOD row is an anchor. Its positive is the OOD row farthest
//! from it in the batch, its negative a head-class ID row. With squared
//! Euclidean distances the per-anchor loss is
//! `max(0, d(a, p) - d(a, n) + margin)` and the value is the mean over anchors.

use crate::diffcore::{sq_dist, DenseMatrix, Rng};
use crate::error::{CoclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSelection {
    pub anchor: usize,
    /// Row in the OOD batch.
    pub positive: usize,
    /// Row in the head-class embedding matrix.
    pub negative: usize,
}

/// For each OOD row, the index of the farthest other OOD row. Ties go to the
/// lowest index. Needs at least two rows.
pub fn farthest_positives(ood_embeddings: &DenseMatrix) -> Vec<usize> {
    let n = ood_embeddings.rows();
    if n < 2 {
        return Vec::new();
    }
    (0..n)
        .map(|a| {
            let za = ood_embeddings.row(a);
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for j in (0..n).filter(|&j| j != a) {
                let d = sq_dist(za, ood_embeddings.row(j));
                if d > best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Uniform draws of one head row per anchor.
pub fn draw_negatives(anchors: usize, head_rows: usize, rng: &mut Rng) -> Vec<usize> {
    if head_rows == 0 {
        return Vec::new();
    }
    (0..anchors).map(|_| rng.index(head_rows)).collect()
}

/// Farthest-OOD positives combined with uniformly drawn head negatives.
/// Empty when there are fewer than two OOD rows or no head rows.
pub fn select_triplet(ood_embeddings: &DenseMatrix, head_embeddings: &DenseMatrix, rng: &mut Rng) -> Vec<TripletSelection> {
    let positives = farthest_positives(ood_embeddings);
    if positives.is_empty() || head_embeddings.rows() == 0 {
        return Vec::new();
    }
    let negatives = draw_negatives(positives.len(), head_embeddings.rows(), rng);
    assemble(&positives, &negatives)
}

pub(crate) fn assemble(positives: &[usize], negatives: &[usize]) -> Vec<TripletSelection> {
    positives
        .iter()
        .zip(negatives)
        .enumerate()
        .map(|(anchor, (&positive, &negative))| TripletSelection {
            anchor,
            positive,
            negative,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DhclOutput {
    pub value: f64,
    pub ood_grad: DenseMatrix,
    pub head_grad: DenseMatrix,
    /// Anchors whose hinge was strictly positive.
    pub active: usize,
}

pub fn dhcl_loss(
    ood_embeddings: &DenseMatrix,
    head_embeddings: &DenseMatrix,
    triplets: &[TripletSelection],
    margin: f64,
) -> Result<DhclOutput> {
    let mut out = DhclOutput {
        value: 0.0,
        ood_grad: DenseMatrix::zeros(ood_embeddings.rows(), ood_embeddings.cols()),
        head_grad: DenseMatrix::zeros(head_embeddings.rows(), head_embeddings.cols()),
        active: 0,
    };
    if triplets.is_empty() {
        return Ok(out);
    }
    if head_embeddings.cols() != ood_embeddings.cols() {
        return Err(CoclError::shape("embedding widths disagree"));
    }
    let d = ood_embeddings.cols();
    for t in triplets {
        if t.anchor >= ood_embeddings.rows() || t.positive >= ood_embeddings.rows() || t.negative >= head_embeddings.rows() {
            return Err(CoclError::shape("triplet index out of range"));
        }
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    let mut ga = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let mut gn = vec![0.0; d];
    for t in triplets {
        let za = ood_embeddings.row(t.anchor);
        let zp = ood_embeddings.row(t.positive);
        let zn = head_embeddings.row(t.negative);
        let hinge = sq_dist(za, zp) - sq_dist(za, zn) + margin;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        out.active += 1;
        for j in 0..d {
            ga[j] = 2.0 * scale * (zn[j] - zp[j]);
            gp[j] = -2.0 * scale * (za[j] - zp[j]);
            gn[j] = 2.0 * scale * (za[j] - zn[j]);
        }
        for (g, v) in out.ood_grad.row_mut(t.anchor).iter_mut().zip(&ga) {
            *g += v;
        }
        for (g, v) in out.ood_grad.row_mut(t.positive).iter_mut().zip(&gp) {
            *g += v;
        }
        for (g, v) in out.head_grad.row_mut(t.negative).iter_mut().zip(&gn) {
            *g += v;
        }
    }
    out.value = total * scale;
    Ok(out)
}
