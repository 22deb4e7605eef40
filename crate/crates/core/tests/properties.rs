//! Randomized invariants over the public API.

use proptest::prelude::*;

use cocl::calibration::{estimate_priors, ood_score, ScoreMethod};
use cocl::datagen::{designate_head_tail, longtail_counts, ClassGroup, HeadTail};
use cocl::diffcore::{DenseMatrix, Rng};
use cocl::losses::{dhcl_loss, ocl_loss, oe_loss, select_triplet, tcpl_loss, TcplForm};
use cocl::metrics::{split_eval, ScoredSample};
use cocl::model::{forward, init_params, Activation, ModelConfig, PrototypeBank};

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    let data = (0..rows).flat_map(|_| rng.unit_vector(cols)).collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

/// Product of `d` Householder reflections: a random orthogonal matrix.
fn orthogonal(d: usize, rng: &mut Rng) -> DenseMatrix {
    let mut q = DenseMatrix::identity(d);
    for _ in 0..d {
        let v = rng.unit_vector(d);
        let h = DenseMatrix::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j]);
        q = q.matmul(&h).unwrap();
    }
    q
}

fn rotate(x: &DenseMatrix, q: &DenseMatrix) -> DenseMatrix {
    x.matmul_nt(q).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn embeddings_are_unit_and_forward_is_pure(
        seed in 0u64..10_000,
        k in 2usize..8,
        d in 1usize..10,
        relu in any::<bool>(),
        scale in 0.01f64..100.0,
    ) {
        let mut rng = Rng::new(seed);
        let mut cfg = ModelConfig::new(d, k);
        cfg.hidden_dims = vec![1 + rng.index(12), 1 + rng.index(12)];
        cfg.embed_dim = 2 + rng.index(7);
        cfg.activation = if relu { Activation::Relu } else { Activation::Tanh };
        let params = init_params(&cfg, &mut rng).unwrap();
        let before = params.clone();
        let x = gaussian(1 + rng.index(20), d, scale, &mut rng);
        let out = forward(&params, &x).unwrap();
        prop_assert_eq!(&params, &before);
        prop_assert_eq!(out.logits.cols(), k + 1);
        for z in out.embeddings.iter_rows() {
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            // an all-zero projection has no direction; every other row is unit length
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-9, "norm {}", norm);
        }
    }

    #[test]
    fn classification_losses_are_nonnegative(seed in 0u64..10_000, k in 2usize..8, n in 1usize..20, gamma in 0.0f64..2.0) {
        let mut rng = Rng::new(seed);
        let logits = gaussian(n, k + 1, 5.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.index(k + 1)).collect();
        prop_assert!(ocl_loss(&logits, &labels, gamma).unwrap().0 >= 0.0);
        let id = gaussian(n, k, 5.0, &mut rng);
        let id_labels: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
        let ood = gaussian(1 + rng.index(10), k, 5.0, &mut rng);
        prop_assert!(oe_loss(&id, &id_labels, &ood, gamma).unwrap().value >= 0.0);
    }

    #[test]
    fn ocl_is_permutation_equivariant(seed in 0u64..10_000, k in 2usize..6, n in 2usize..16) {
        let mut rng = Rng::new(seed);
        let logits = gaussian(n, k + 1, 3.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.index(k + 1)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.index(i + 1));
        }
        let (v, g) = ocl_loss(&logits, &labels, 0.5).unwrap();
        let permuted_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (pv, pg) = ocl_loss(&logits.select_rows(&perm), &permuted_labels, 0.5).unwrap();
        prop_assert!(close(v, pv));
        prop_assert!(g.select_rows(&perm).max_abs_diff(&pg) <= 1e-12);
    }

    #[test]
    fn dhcl_depends_only_on_distances(seed in 0u64..10_000, d in 2usize..6, n_ood in 2usize..10, n_head in 1usize..10) {
        let mut rng = Rng::new(seed);
        let ood = unit_rows(n_ood, d, &mut rng);
        let head = unit_rows(n_head, d, &mut rng);
        let triplets = select_triplet(&ood, &head, &mut Rng::new(seed + 1));
        let q = orthogonal(d, &mut rng);
        let (ood_r, head_r) = (rotate(&ood, &q), rotate(&head, &q));
        let a = dhcl_loss(&ood, &head, &triplets, 1.0).unwrap();
        let b = dhcl_loss(&ood_r, &head_r, &triplets, 1.0).unwrap();
        prop_assert!(a.value >= 0.0);
        prop_assert!(close(a.value, b.value), "{} vs {}", a.value, b.value);
    }

    #[test]
    fn tcpl_is_rotation_invariant_and_nonnegative(
        seed in 0u64..10_000,
        d in 2usize..6,
        n_proto in 1usize..4,
        n_tail in 1usize..10,
        n_ood in 0usize..10,
        t in 0.05f64..1.0,
    ) {
        let mut rng = Rng::new(seed);
        let ids: Vec<usize> = (0..n_proto).map(|i| 10 + i).collect();
        let bank = PrototypeBank::new(unit_rows(n_proto, d, &mut rng), ids.clone()).unwrap();
        let tail = unit_rows(n_tail, d, &mut rng);
        let classes: Vec<usize> = (0..n_tail).map(|_| ids[rng.index(n_proto)]).collect();
        let ood = unit_rows(n_ood, d, &mut rng);
        let q = orthogonal(d, &mut rng);
        let bank_r = PrototypeBank::new(rotate(&bank.m, &q), ids).unwrap();
        let a = tcpl_loss(&tail, &classes, &bank, &ood, t, TcplForm::Negative).unwrap();
        let b = tcpl_loss(&rotate(&tail, &q), &classes, &bank_r, &rotate(&ood, &q), t, TcplForm::Negative).unwrap();
        prop_assert!(a.value >= 0.0);
        prop_assert!(close(a.value, b.value), "{} vs {}", a.value, b.value);
    }

    #[test]
    fn longtail_profile_is_monotone_with_fixed_ends(k in 2usize..30, n_max in 1usize..5000, rho in 1.0f64..200.0) {
        match longtail_counts(k, n_max, rho) {
            Ok(counts) => {
                prop_assert_eq!(counts.len(), k);
                prop_assert_eq!(counts[0], n_max);
                prop_assert_eq!(counts[k - 1], (n_max as f64 / rho).round() as usize);
                prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(counts.iter().all(|&c| c >= 1));
            }
            Err(_) => prop_assert_eq!((n_max as f64 / rho).round() as usize, 0),
        }
    }

    #[test]
    fn head_and_tail_are_disjoint_extremes(
        counts in prop::collection::vec(1usize..500, 1..20),
        head_pct in 0.0f64..0.6,
        tail_pct in 0.0f64..0.4,
    ) {
        let k = counts.len() as f64;
        let n_head = (head_pct * k - 1e-9).ceil().max(0.0) as usize;
        let n_tail = (tail_pct * k - 1e-9).ceil().max(0.0) as usize;
        let result = designate_head_tail(&counts, head_pct, tail_pct);
        // rounding both sizes up can make them overlap even when the fractions do not
        if n_head + n_tail > counts.len() {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let g = result.unwrap();
        prop_assert!(g.head.iter().all(|c| !g.tail.contains(c)));
        prop_assert!(g.head.windows(2).all(|w| w[0] < w[1]) && g.tail.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(g.head.len(), n_head);
        prop_assert_eq!(g.tail.len(), n_tail);
        for &h in &g.head {
            prop_assert!(g.tail.iter().all(|&t| counts[h] >= counts[t]));
        }
    }

    #[test]
    fn split_metrics_stay_in_unit_interval(seed in 0u64..10_000, n_id in 1usize..60, n_ood in 1usize..60, ties in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let groups = [ClassGroup::Head, ClassGroup::Mid, ClassGroup::Tail];
        let score = |rng: &mut Rng| if ties { rng.index(4) as f64 } else { rng.normal() };
        let mut samples: Vec<ScoredSample> = (0..n_id)
            .map(|_| {
                let s = score(&mut rng);
                ScoredSample::id(s, rng.index(3), rng.index(3), groups[rng.index(3)])
            })
            .collect();
        samples.extend((0..n_ood).map(|_| ScoredSample::ood(score(&mut rng))));
        let r = split_eval(&samples).unwrap();
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        prop_assert!([r.auroc, r.ap_in, r.ap_out, r.fpr95, r.acc].into_iter().all(unit));
        prop_assert!(r.acc_tail.is_none_or(unit));
        for m in [r.head, r.tail].into_iter().flatten() {
            prop_assert!([m.auroc, m.ap_in, m.ap_out, m.fpr95].into_iter().all(unit));
        }
    }

    #[test]
    fn calibrated_outlier_score_is_a_probability(seed in 0u64..10_000, k in 2usize..10, tau in 0.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let counts: Vec<usize> = (0..k).map(|_| 1 + rng.index(300)).collect();
        let calib = estimate_priors(&counts).unwrap().with_tau(tau);
        let logits: Vec<f64> = (0..=k).map(|_| 10.0 * rng.normal()).collect();
        for method in [ScoreMethod::OclRaw, ScoreMethod::CoclCalibrated] {
            let s = ood_score(&logits, &calib, method).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
        let msp = ood_score(&logits[..k], &calib, ScoreMethod::MspOe).unwrap();
        prop_assert!((0.0..=1.0 - 1.0 / k as f64 + 1e-12).contains(&msp));
    }
}

#[test]
fn empty_groups_are_allowed() {
    let g = designate_head_tail(&[5, 4, 3], 0.0, 0.0).unwrap();
    assert_eq!(g, HeadTail::default());
}
