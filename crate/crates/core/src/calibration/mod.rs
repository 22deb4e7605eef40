//! Prior-aware logit calibration with an outlier class, OOD scoring rules,
//! and the outlier-probability sensitivity diagnostic.
//!
//! Calibrated probabilities are `softmax(f_i - τ·log n_i)` over all `k + 1`
//! positions, where `n_i` is the empirical class prior for ID classes and
//! `n_{k+1} = 1`, so the outlier logit is never shifted.

use serde::{Deserialize, Serialize};

use crate::diffcore::{argmax, softmax_in_place};
use crate::error::{CoclError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    /// `k` ID priors followed by the outlier prior.
    pub priors: Vec<f64>,
    pub tau: f64,
}

impl CalibrationParams {
    /// Priors for `k` equally sized classes.
    pub fn balanced(k: usize, tau: f64) -> Self {
        let mut priors = vec![1.0 / k as f64; k];
        priors.push(1.0);
        Self { priors, tau }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn num_id_classes(&self) -> usize {
        self.priors.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.len() < 3 {
            return Err(CoclError::validation("need at least 2 ID priors plus the outlier prior"));
        }
        if self.priors.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(CoclError::validation("priors must be finite and positive"));
        }
        let k = self.num_id_classes();
        let sum: f64 = self.priors[..k].iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoclError::validation(format!("ID priors sum to {sum}, expected 1")));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(CoclError::validation("tau must be finite and >= 0"));
        }
        Ok(())
    }

    fn shifts(&self) -> impl Iterator<Item = f64> + '_ {
        self.priors.iter().map(move |&n| if self.tau == 0.0 { 0.0 } else { self.tau * n.ln() })
    }
}

/// `n_i = N_i / ΣN`, outlier prior 1, `τ = 1`.
pub fn estimate_priors(class_counts: &[usize]) -> Result<CalibrationParams> {
    if class_counts.len() < 2 {
        return Err(CoclError::validation("need at least 2 class counts"));
    }
    if class_counts.contains(&0) {
        return Err(CoclError::validation("every class needs at least one training sample"));
    }
    let total: usize = class_counts.iter().sum();
    let mut priors: Vec<f64> = class_counts.iter().map(|&c| c as f64 / total as f64).collect();
    priors.push(1.0);
    Ok(CalibrationParams { priors, tau: 1.0 })
}

/// Calibrated `(k+1)`-way probabilities.
pub fn calibrate(logits: &[f64], params: &CalibrationParams) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    calibrate_into(logits, params, &mut out)?;
    Ok(out)
}

pub(crate) fn calibrate_into(logits: &[f64], params: &CalibrationParams, out: &mut [f64]) -> Result<()> {
    if logits.len() != params.priors.len() {
        return Err(CoclError::shape(format!(
            "{} logits for {} priors",
            logits.len(),
            params.priors.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CoclError::numeric("non-finite logit"));
    }
    for ((o, &f), s) in out.iter_mut().zip(logits).zip(params.shifts()) {
        *o = f - s;
    }
    softmax_in_place(out);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    /// `1 - max softmax` over a k-way head.
    MspOe,
    /// Raw softmax probability of the outlier position.
    OclRaw,
    /// Calibrated probability of the outlier position.
    CoclCalibrated,
}

impl std::str::FromStr for ScoreMethod {
    type Err = CoclError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "msp_oe" | "msp" => Ok(Self::MspOe),
            "ocl_raw" => Ok(Self::OclRaw),
            "cocl_calibrated" | "cocl" => Ok(Self::CoclCalibrated),
            _ => Err(CoclError::validation(format!("unknown score method '{s}'"))),
        }
    }
}

/// OOD score, higher meaning more likely OOD. `params` fixes `k`.
pub fn ood_score(logits: &[f64], params: &CalibrationParams, method: ScoreMethod) -> Result<f64> {
    let k = params.num_id_classes();
    match method {
        ScoreMethod::MspOe => {
            if logits.len() != k {
                return Err(CoclError::shape(format!("MSP scoring needs {k} logits, got {}", logits.len())));
            }
            let mut p = logits.to_vec();
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CoclError::numeric("non-finite logit"));
            }
            softmax_in_place(&mut p);
            Ok(1.0 - p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        ScoreMethod::OclRaw => {
            let p = calibrate(logits, &params.clone().with_tau(0.0))?;
            Ok(p[k])
        }
        ScoreMethod::CoclCalibrated => Ok(calibrate(logits, params)?[k]),
    }
}

/// `∂P(y = k+1 | x) / ∂f_i` of the calibrated distribution, which equals
/// `-P_{k+1}·P_i`. `class` is a zero-based ID class.
pub fn outlier_sensitivity(logits: &[f64], params: &CalibrationParams, class: usize) -> Result<f64> {
    let k = params.num_id_classes();
    if class >= k {
        return Err(CoclError::validation(format!("class {class} is not an ID class (k = {k})")));
    }
    let p = calibrate(logits, params)?;
    Ok(-p[k] * p[class])
}

/// Predicted ID class: argmax over the k ID positions, or over all `k + 1`
/// positions when `include_outlier` is set (a prediction of `k` then means
/// "outlier").
pub fn predict_class(probs: &[f64], include_outlier: bool) -> usize {
    if include_outlier {
        argmax(probs)
    } else {
        argmax(&probs[..probs.len() - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_grad, softmax, Rng, FD_STEP};
    use proptest::prelude::*;

    #[test]
    fn priors_from_counts() {
        let p = estimate_priors(&[90, 9, 1]).unwrap();
        assert_eq!(p.priors, vec![0.9, 0.09, 0.01, 1.0]);
        assert_eq!(p.tau, 1.0);
        let p = estimate_priors(&[25; 4]).unwrap();
        assert_eq!(p.priors, vec![0.25, 0.25, 0.25, 0.25, 1.0]);
        assert!(matches!(estimate_priors(&[3, 0]), Err(CoclError::Validation(_))));
    }

    #[test]
    fn frozen_calibration_example() {
        let params = CalibrationParams {
            priors: vec![0.9, 0.09, 0.01, 1.0],
            tau: 1.0,
        };
        let p = calibrate(&[1.0, 0.5, 0.2, 0.0], &params).unwrap();
        // mpmath, 50 digits
        let expected = [
            0.020904755796972893,
            0.12679375324669467,
            0.84538010406395817,
            0.0069213868923742714,
        ];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        let s = ood_score(&[1.0, 0.5, 0.2, 0.0], &params, ScoreMethod::CoclCalibrated).unwrap();
        assert!((s - expected[3]).abs() < 1e-15);
    }

    #[test]
    fn tau_zero_is_softmax() {
        let params = CalibrationParams {
            priors: vec![0.7, 0.2, 0.1, 1.0],
            tau: 0.0,
        };
        let f = [0.3, -1.2, 2.0, 0.4];
        let p = calibrate(&f, &params).unwrap();
        let s = softmax(&f).unwrap();
        for (a, b) in p.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn score_methods() {
        let params = CalibrationParams::balanced(10, 1.0);
        let s = ood_score(&[0.0; 10], &params, ScoreMethod::MspOe).unwrap();
        assert!((s - 0.9).abs() < 1e-12);
        let mut f = vec![0.0; 11];
        f[10] = 800.0;
        assert!((ood_score(&f, &params, ScoreMethod::OclRaw).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(ood_score(&f, &params, ScoreMethod::MspOe), Err(CoclError::Shape(_))));
        assert!(matches!(ood_score(&[0.0; 10], &params, ScoreMethod::OclRaw), Err(CoclError::Shape(_))));
    }

    #[test]
    fn balanced_priors_keep_id_argmax() {
        let params = CalibrationParams::balanced(4, 1.0);
        let f = [0.1, 1.5, -0.3, 0.9, 4.0];
        let p = calibrate(&f, &params).unwrap();
        assert_eq!(predict_class(&p, false), 1);
        assert_eq!(predict_class(&p, true), 4);
    }

    fn random_params(rng: &mut Rng, k: usize) -> CalibrationParams {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.01, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mut priors: Vec<f64> = raw.iter().map(|v| v / s).collect();
        priors.push(1.0);
        CalibrationParams { priors, tau: 1.0 }
    }

    #[test]
    fn sensitivity_matches_fd_and_is_negative() {
        let mut rng = Rng::new(17);
        for _ in 0..100 {
            let k = 2 + rng.index(8);
            let params = random_params(&mut rng, k);
            let f: Vec<f64> = (0..=k).map(|_| 2.0 * rng.normal()).collect();
            let numeric = finite_diff_grad(|x| calibrate(x, &params).unwrap()[k], &f, FD_STEP).unwrap();
            for i in 0..k {
                let s = outlier_sensitivity(&f, &params, i).unwrap();
                assert!(s < 0.0);
                assert!((s - numeric[i]).abs() <= 1e-6 * s.abs().max(1e-12) + 1e-11, "{s} vs {}", numeric[i]);
            }
        }
    }

    #[test]
    fn rarer_class_has_larger_sensitivity() {
        let params = CalibrationParams {
            priors: vec![0.6, 0.3, 0.1, 1.0],
            tau: 1.0,
        };
        let f = [0.5, 0.5, 0.5, 0.0];
        let s1 = outlier_sensitivity(&f, &params, 1).unwrap().abs();
        let s2 = outlier_sensitivity(&f, &params, 2).unwrap().abs();
        let s0 = outlier_sensitivity(&f, &params, 0).unwrap().abs();
        assert!(s2 > s1 && s1 > s0);
    }

    proptest! {
        #[test]
        fn calibrated_is_probability(seed in 0u64..10_000, k in 2usize..12, scale in 0.1f64..20.0, tau in 0.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let params = random_params(&mut rng, k).with_tau(tau);
            let f: Vec<f64> = (0..=k).map(|_| scale * rng.normal()).collect();
            let p = calibrate(&f, &params).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn lowering_a_prior_raises_its_probability(seed in 0u64..10_000, k in 2usize..8, tau in 0.1f64..2.0) {
            let mut rng = Rng::new(seed);
            let params = random_params(&mut rng, k).with_tau(tau);
            let f: Vec<f64> = (0..=k).map(|_| rng.normal()).collect();
            let i = rng.index(k);
            let mut lowered = params.clone();
            lowered.priors[i] *= 0.5;
            let a = calibrate(&f, &params).unwrap()[i];
            let b = calibrate(&f, &lowered).unwrap()[i];
            prop_assert!(b > a);
        }

        #[test]
        fn decision_invariant_to_logit_shift(seed in 0u64..10_000, k in 2usize..10, c in -50.0f64..50.0) {
            let mut rng = Rng::new(seed);
            let params = random_params(&mut rng, k);
            let f: Vec<f64> = (0..=k).map(|_| rng.normal()).collect();
            let g: Vec<f64> = f.iter().map(|v| v + c).collect();
            let a = predict_class(&calibrate(&f, &params).unwrap(), false);
            let b = predict_class(&calibrate(&g, &params).unwrap(), false);
            prop_assert_eq!(a, b);
        }
    }
}
