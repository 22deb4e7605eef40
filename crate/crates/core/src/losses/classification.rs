use super::check_labels;
use crate::diffcore::{softmax_in_place, DenseMatrix};
use crate::error::{CoclError, Result};

/// Mean cross-entropy of `logits` against `labels` plus the gradient of that
/// mean, scaled by `weight`, accumulated into `grad`.
pub fn cross_entropy_rows(logits: &DenseMatrix, labels: &[usize], weight: f64, grad: &mut DenseMatrix) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let scale = weight / n as f64;
    let mut total = 0.0;
    let mut p = vec![0.0; logits.cols()];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        p.copy_from_slice(row);
        softmax_in_place(&mut p);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        let g = grad.row_mut(i);
        for (j, (gj, pj)) in g.iter_mut().zip(&p).enumerate() {
            *gj += scale * (pj - if j == y { 1.0 } else { 0.0 });
        }
    }
    weight * total / n as f64
}

/// Outlier-class objective on (k+1)-way logits.
///
/// Rows labelled `k` are auxiliary outliers. The value is the mean ID
/// cross-entropy plus `gamma` times the mean outlier-row cross-entropy toward
/// class `k`; each mean runs over its own rows. Returns the value and the
/// gradient with respect to `logits`.
pub fn ocl_loss(logits: &DenseMatrix, labels: &[usize], gamma: f64) -> Result<(f64, DenseMatrix)> {
    if labels.len() != logits.rows() {
        return Err(CoclError::shape("one label per logit row required"));
    }
    if logits.cols() < 3 {
        return Err(CoclError::shape("outlier-class logits need k + 1 >= 3 columns"));
    }
    let k = logits.cols() - 1;
    check_labels(labels, k + 1)?;
    let (id_rows, ood_rows): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] < k);
    let mut grad = DenseMatrix::zeros(logits.rows(), logits.cols());
    let mut value = 0.0;
    for (rows, weight) in [(&id_rows, 1.0), (&ood_rows, gamma)] {
        if rows.is_empty() {
            continue;
        }
        let sub = logits.select_rows(rows);
        let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let mut sub_grad = DenseMatrix::zeros(rows.len(), logits.cols());
        value += cross_entropy_rows(&sub, &sub_labels, weight, &mut sub_grad);
        for (r, &i) in rows.iter().enumerate() {
            grad.row_mut(i).copy_from_slice(sub_grad.row(r));
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct OeLossOutput {
    pub value: f64,
    pub id_grad: DenseMatrix,
    pub ood_grad: DenseMatrix,
}

/// Outlier exposure on k-way logits: mean ID cross-entropy plus `gamma`
/// times the mean cross-entropy between the uniform distribution and the
/// prediction on auxiliary outliers.
pub fn oe_loss(id_logits: &DenseMatrix, id_labels: &[usize], ood_logits: &DenseMatrix, gamma: f64) -> Result<OeLossOutput> {
    if id_labels.len() != id_logits.rows() {
        return Err(CoclError::shape("one label per ID logit row required"));
    }
    let k = id_logits.cols();
    if ood_logits.rows() > 0 && ood_logits.cols() != k {
        return Err(CoclError::shape("ID and OOD logits must have the same width"));
    }
    if k < 2 {
        return Err(CoclError::shape("need at least 2 classes"));
    }
    check_labels(id_labels, k)?;
    let mut id_grad = DenseMatrix::zeros(id_logits.rows(), k);
    let mut value = cross_entropy_rows(id_logits, id_labels, 1.0, &mut id_grad);

    let m = ood_logits.rows();
    let mut ood_grad = DenseMatrix::zeros(m, k);
    if m > 0 {
        let scale = gamma / m as f64;
        let uniform = 1.0 / k as f64;
        let mut total = 0.0;
        let mut p = vec![0.0; k];
        for i in 0..m {
            let row = ood_logits.row(i);
            p.copy_from_slice(row);
            softmax_in_place(&mut p);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            let mean = row.iter().sum::<f64>() / k as f64;
            total += lse - mean;
            for (g, pj) in ood_grad.row_mut(i).iter_mut().zip(&p) {
                *g = scale * (pj - uniform);
            }
        }
        value += gamma * total / m as f64;
    }
    Ok(OeLossOutput { value, id_grad, ood_grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_grad, relative_error, Rng, FD_STEP};

    fn random_logits(rng: &mut Rng, n: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, c, |_, _| 2.0 * rng.normal())
    }

    #[test]
    fn oe_uniform_ood_row_is_ln_k() {
        let id = DenseMatrix::zeros(0, 5);
        let ood = DenseMatrix::from_fn(1, 5, |_, _| 0.7);
        let out = oe_loss(&id, &[], &ood, 1.0).unwrap();
        assert!((out.value - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn oe_gamma_zero_is_plain_cross_entropy() {
        let mut rng = Rng::new(1);
        let id = random_logits(&mut rng, 6, 4);
        let labels = [0, 1, 2, 3, 0, 1];
        let ood = random_logits(&mut rng, 3, 4);
        let out = oe_loss(&id, &labels, &ood, 0.0).unwrap();
        let mut g = DenseMatrix::zeros(6, 4);
        let ce = cross_entropy_rows(&id, &labels, 1.0, &mut g);
        assert_eq!(out.value, ce);
        assert!(out.ood_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oe_label_out_of_range() {
        let id = DenseMatrix::zeros(1, 3);
        assert!(matches!(oe_loss(&id, &[3], &DenseMatrix::zeros(0, 3), 1.0), Err(CoclError::Validation(_))));
    }

    #[test]
    fn oe_gradient_matches_fd() {
        let mut rng = Rng::new(2);
        let id = random_logits(&mut rng, 5, 4);
        let ood = random_logits(&mut rng, 3, 4);
        let labels = [3, 1, 0, 2, 2];
        let out = oe_loss(&id, &labels, &ood, 0.5).unwrap();
        let flat: Vec<f64> = [id.data(), ood.data()].concat();
        let f = |x: &[f64]| {
            let a = DenseMatrix::new(5, 4, x[..20].to_vec()).unwrap();
            let b = DenseMatrix::new(3, 4, x[20..].to_vec()).unwrap();
            oe_loss(&a, &labels, &b, 0.5).unwrap().value
        };
        let numeric = finite_diff_grad(f, &flat, FD_STEP).unwrap();
        let analytic = [out.id_grad.data(), out.ood_grad.data()].concat();
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn ocl_confident_correct_is_near_zero() {
        let mut logits = DenseMatrix::zeros(2, 4);
        logits.set(0, 1, 60.0);
        logits.set(1, 3, 60.0);
        let (v, _) = ocl_loss(&logits, &[1, 3], 1.0).unwrap();
        assert!(v < 1e-20);
    }

    #[test]
    fn ocl_uniform_logits_k10() {
        let logits = DenseMatrix::zeros(3, 11);
        let (v, _) = ocl_loss(&logits, &[0, 4, 9], 0.05).unwrap();
        assert!((v - 11f64.ln()).abs() < 1e-14);
        let (v, _) = ocl_loss(&DenseMatrix::zeros(2, 11), &[10, 10], 1.0).unwrap();
        assert!((v - 11f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn ocl_gradient_matches_fd() {
        let mut rng = Rng::new(3);
        let logits = random_logits(&mut rng, 7, 4);
        let labels = [0, 3, 1, 3, 2, 3, 0];
        let (_, g) = ocl_loss(&logits, &labels, 0.3).unwrap();
        let f = |x: &[f64]| ocl_loss(&DenseMatrix::new(7, 4, x.to_vec()).unwrap(), &labels, 0.3).unwrap().0;
        let numeric = finite_diff_grad(f, logits.data(), FD_STEP).unwrap();
        assert!(relative_error(g.data(), &numeric) < 1e-6);
    }

    #[test]
    fn ocl_permutation_equivariant() {
        let mut rng = Rng::new(4);
        let logits = random_logits(&mut rng, 5, 3);
        let labels = [0, 2, 1, 2, 0];
        let perm = [3, 0, 4, 2, 1];
        let (v, g) = ocl_loss(&logits, &labels, 0.7).unwrap();
        let pl = logits.select_rows(&perm);
        let plab: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (pv, pg) = ocl_loss(&pl, &plab, 0.7).unwrap();
        assert!((v - pv).abs() < 1e-14);
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(pg.row(r), g.row(i));
        }
    }

    #[test]
    fn ocl_rejects_bad_labels() {
        assert!(matches!(ocl_loss(&DenseMatrix::zeros(1, 4), &[4], 1.0), Err(CoclError::Validation(_))));
        assert!(matches!(ocl_loss(&DenseMatrix::zeros(1, 4), &[0, 1], 1.0), Err(CoclError::Shape(_))));
    }
}
