//! Dense numeric core: matrices, seeded random streams, stable softmax and
//! the central finite-difference gradient used to verify every analytic
//! gradient in the crate.

mod matrix;
mod rng;

pub use matrix::{axpy, dot, norm, sq_dist, DenseMatrix};
pub(crate) use matrix::tn_kernel;
pub use rng::{streams, Rng};

use crate::error::{CoclError, Result};
use crate::par::{self, Mode};

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(CoclError::shape("softmax of empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CoclError::numeric("softmax input is not finite"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax over a non-empty finite slice, overwriting it.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v)`, max-shifted. Returns -inf for an empty slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    finite_diff_grad_with(Mode::Sequential, f, x, h)
}

/// [`finite_diff_grad`] with coordinates evaluated under `mode`.
pub fn finite_diff_grad_with<F>(mode: Mode, f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(CoclError::validation(format!("finite-difference step {h} must be positive")));
    }
    let coords = par::map_indices(mode, x.len(), |i| {
        let mut p = x.to_vec();
        p[i] = x[i] + h;
        let plus = f(&p);
        p[i] = x[i] - h;
        let minus = f(&p);
        if plus.is_finite() && minus.is_finite() {
            Ok((plus - minus) / (2.0 * h))
        } else {
            Err(CoclError::numeric(format!(
                "non-finite function value around coordinate {i}"
            )))
        }
    });
    coords.into_iter().collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vectors vanish.
///
/// This is the comparison used for every gradient check in the crate.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_gap_is_stable() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // mpmath, 50 digits: exp(v_i) / sum exp(v_j) for v = [1, 2, 3]
        let expected = [
            0.090030573170380458,
            0.24472847105479765,
            0.66524095577482189,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_empty_is_shape_error() {
        assert!(matches!(softmax(&[]), Err(CoclError::Shape(_))));
    }

    #[test]
    fn argmax_ties_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn fd_of_square() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], FD_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], FD_STEP).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn fd_reports_non_finite() {
        let r = finite_diff_grad(|x| 1.0 / x[0], &[0.0], FD_STEP);
        assert!(r.is_ok());
        let r = finite_diff_grad(|x| (x[0] - 1e-5).ln(), &[0.0], FD_STEP);
        assert!(matches!(r, Err(CoclError::Numeric(_))));
    }

    #[test]
    fn fd_modes_agree() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v.sin()).sum::<f64>();
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        assert_eq!(
            finite_diff_grad_with(Mode::Sequential, f, &x, FD_STEP).unwrap(),
            finite_diff_grad_with(Mode::Parallel, f, &x, FD_STEP).unwrap()
        );
    }

    fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(9);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.get(i, p) * b.get(p, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn seeded_matrices_are_bit_identical() {
        let a = random_matrix(&mut Rng::new(5), 6, 6);
        let b = random_matrix(&mut Rng::new(5), 6, 6);
        let bits = |m: &DenseMatrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..10_000, n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = random_matrix(&mut rng, n, m);
            let b = random_matrix(&mut rng, m, k);
            let c = random_matrix(&mut rng, k, l);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |s, x| s.max(x.abs()));
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }

        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50f64..50.0, 1..12), c in -100f64..100.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
