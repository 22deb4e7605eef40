//! Self-diagnostics behind the `check` subcommand: gradient checks against
//! central differences, calibration properties, and metric oracles.

use crate::calibration::{calibrate, estimate_priors, outlier_sensitivity};
use crate::datagen::HeadTail;
use crate::diffcore::{finite_diff_grad, relative_error, sq_dist, softmax, DenseMatrix, Rng, FD_STEP};
use crate::error::Result;
use crate::losses::{
    dhcl_loss, draw_negatives, farthest_positives, ocl_loss, oe_loss, tcpl_loss, total_loss, LossWeights, StepBatch,
    TcplForm, TripletSelection,
};
use crate::metrics::{auroc, average_precision, fpr_at_tpr, Positive, ScoredSample};
use crate::model::{init_params, init_prototypes, Activation, ModelConfig, PrototypeBank};

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Oe,
    Ocl,
    Tcpl,
    Dhcl,
    Total,
}

impl GradTarget {
    pub const ALL: [GradTarget; 5] = [GradTarget::Oe, GradTarget::Ocl, GradTarget::Tcpl, GradTarget::Dhcl, GradTarget::Total];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Oe => "oe_loss",
            GradTarget::Ocl => "ocl_loss",
            GradTarget::Tcpl => "tcpl_loss",
            GradTarget::Dhcl => "dhcl_loss",
            GradTarget::Total => "total_loss",
        }
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

fn uniform_in(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn split_off(x: &[f64], sizes: &[(usize, usize)]) -> Vec<DenseMatrix> {
    let mut at = 0;
    sizes
        .iter()
        .map(|&(r, c)| {
            let m = DenseMatrix::new(r, c, x[at..at + r * c].to_vec()).expect("sizes add up");
            at += r * c;
            m
        })
        .collect()
}

fn concat(ms: &[&DenseMatrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// Analytic and central-difference gradients of one random instance.
fn grad_instance(target: GradTarget, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    match target {
        GradTarget::Oe => {
            let k = 2 + rng.index(5);
            let (n, m) = (1 + rng.index(6), rng.index(6));
            let id = random_matrix(n, k, 2.0, rng);
            let ood = random_matrix(m, k, 2.0, rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
            let gamma = uniform_in(0.05, 1.0, rng);
            let out = oe_loss(&id, &labels, &ood, gamma)?;
            let sizes = [(n, k), (m, k)];
            let f = |x: &[f64]| {
                let p = split_off(x, &sizes);
                oe_loss(&p[0], &labels, &p[1], gamma).map_or(f64::NAN, |o| o.value)
            };
            let numeric = finite_diff_grad(f, &concat(&[&id, &ood]), FD_STEP)?;
            Ok((concat(&[&out.id_grad, &out.ood_grad]), numeric))
        }
        GradTarget::Ocl => {
            let k = 2 + rng.index(5);
            let n = 1 + rng.index(8);
            let logits = random_matrix(n, k + 1, 2.0, rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.index(k + 1)).collect();
            let gamma = uniform_in(0.05, 1.0, rng);
            let (_, grad) = ocl_loss(&logits, &labels, gamma)?;
            let f = |x: &[f64]| {
                let l = DenseMatrix::new(n, k + 1, x.to_vec()).expect("shape");
                ocl_loss(&l, &labels, gamma).map_or(f64::NAN, |o| o.0)
            };
            let numeric = finite_diff_grad(f, logits.data(), FD_STEP)?;
            Ok((grad.data().to_vec(), numeric))
        }
        GradTarget::Tcpl => {
            let d = 2 + rng.index(4);
            let n_proto = 1 + rng.index(4);
            let ids: Vec<usize> = (0..n_proto).map(|i| 3 * i + 1).collect();
            let bank = init_prototypes(&ids, d, rng)?;
            let (n, m) = (1 + rng.index(5), rng.index(5));
            let tail = random_matrix(n, d, 0.6, rng);
            let ood = random_matrix(m, d, 0.6, rng);
            let classes: Vec<usize> = (0..n).map(|_| ids[rng.index(n_proto)]).collect();
            let t = uniform_in(0.2, 1.0, rng);
            let out = tcpl_loss(&tail, &classes, &bank, &ood, t, TcplForm::Negative)?;
            let sizes = [(n, d), (n_proto, d), (m, d)];
            let f = |x: &[f64]| {
                let p = split_off(x, &sizes);
                let b = PrototypeBank::new(p[1].clone(), ids.clone()).expect("bank");
                tcpl_loss(&p[0], &classes, &b, &p[2], t, TcplForm::Negative).map_or(f64::NAN, |o| o.value)
            };
            let numeric = finite_diff_grad(f, &concat(&[&tail, &bank.m, &ood]), FD_STEP)?;
            Ok((concat(&[&out.tail_grad, &out.bank_grad, &out.ood_grad]), numeric))
        }
        GradTarget::Dhcl => loop {
            let d = 2 + rng.index(4);
            let (m, n) = (2 + rng.index(5), 1 + rng.index(5));
            let ood = random_matrix(m, d, 1.0, rng);
            let head = random_matrix(n, d, 1.0, rng);
            let margin = uniform_in(0.5, 2.0, rng);
            let positives = farthest_positives(&ood);
            let negatives = draw_negatives(m, n, rng);
            let triplets: Vec<TripletSelection> = positives
                .iter()
                .zip(&negatives)
                .enumerate()
                .map(|(anchor, (&positive, &negative))| TripletSelection {
                    anchor,
                    positive,
                    negative,
                })
                .collect();
            // keep every hinge clear of its kink
            let near_kink = triplets.iter().any(|t| {
                let h = sq_dist(ood.row(t.anchor), ood.row(t.positive)) - sq_dist(ood.row(t.anchor), head.row(t.negative)) + margin;
                h.abs() < 1e-3
            });
            if near_kink {
                continue;
            }
            let out = dhcl_loss(&ood, &head, &triplets, margin)?;
            let sizes = [(m, d), (n, d)];
            let f = |x: &[f64]| {
                let p = split_off(x, &sizes);
                dhcl_loss(&p[0], &p[1], &triplets, margin).map_or(f64::NAN, |o| o.value)
            };
            let numeric = finite_diff_grad(f, &concat(&[&ood, &head]), FD_STEP)?;
            break Ok((concat(&[&out.ood_grad, &out.head_grad]), numeric));
        },
        GradTarget::Total => {
            let mut cfg = ModelConfig::new(3, 4);
            cfg.hidden_dims = vec![2];
            cfg.activation = Activation::Tanh;
            cfg.embed_dim = 3;
            let mut params = init_params(&cfg, rng)?;
            let mut flat = params.to_flat();
            for v in &mut flat {
                *v += 0.3 * rng.normal();
            }
            params.set_flat(&flat)?;
            let groups = HeadTail {
                head: vec![0, 1],
                tail: vec![3],
            };
            let bank = init_prototypes(&groups.tail, 3, rng)?;
            let n = 4 + rng.index(5);
            let m = 2 + rng.index(4);
            let mut batch = StepBatch {
                id_inputs: random_matrix(n, 3, 1.0, rng),
                id_labels: (0..n).map(|_| rng.index(4)).collect(),
                ood_inputs: random_matrix(m, 3, 2.0, rng),
                negatives: Vec::new(),
            };
            let pool = batch.head_pool(&groups).len();
            batch.negatives = draw_negatives(m, pool, rng);
            let w = LossWeights {
                gamma: uniform_in(0.05, 1.0, rng),
                alpha: uniform_in(0.05, 1.0, rng),
                beta: uniform_in(0.05, 1.0, rng),
                temperature: uniform_in(0.2, 1.0, rng),
                margin: uniform_in(0.5, 2.0, rng),
            };
            let out = total_loss(&params, Some(&bank), &batch, &groups, &w, TcplForm::Negative)?;
            let np = params.num_params();
            let mut x = params.to_flat();
            x.extend_from_slice(bank.m.data());
            let f = |x: &[f64]| {
                let mut p = params.clone();
                p.set_flat(&x[..np]).expect("sizes");
                let mut b = bank.clone();
                b.m.data_mut().copy_from_slice(&x[np..]);
                total_loss(&p, Some(&b), &batch, &groups, &w, TcplForm::Negative).map_or(f64::NAN, |o| o.breakdown.total)
            };
            let numeric = finite_diff_grad(f, &x, FD_STEP)?;
            let mut analytic = out.param_grads.concat();
            analytic.extend_from_slice(out.bank_grad.expect("tail term on").data());
            Ok((analytic, numeric))
        }
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over `instances` random instances.
pub fn gradient_check(target: GradTarget, instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = Rng::for_stream(seed, 1000 + i as u64);
        let (analytic, numeric) = grad_instance(target, &mut rng)?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn random_counts(k: usize, rng: &mut Rng) -> Vec<usize> {
    (0..k).map(|_| 1 + rng.index(500)).collect()
}

/// Calibration properties on `draws` random logit vectors.
pub fn calibration_checks(draws: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::for_stream(seed, 2000);
    let (mut norm_err, mut softmax_err, mut outlier_err, mut fd_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut sign_ok, mut order_ok) = (true, true);
    for _ in 0..draws {
        let k = 2 + rng.index(9);
        let logits: Vec<f64> = (0..=k).map(|_| 3.0 * rng.normal()).collect();
        let counts = random_counts(k, &mut rng);
        let tau = uniform_in(0.0, 3.0, &mut rng);
        let calib = estimate_priors(&counts)?.with_tau(tau);
        let p = calibrate(&logits, &calib)?;
        norm_err = norm_err.max((p.iter().sum::<f64>() - 1.0).abs());

        let raw = calibrate(&logits, &calib.clone().with_tau(0.0))?;
        let plain = softmax(&logits)?;
        softmax_err = softmax_err.max(raw.iter().zip(&plain).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        // outlier prior is one: its logit is never shifted
        let total: usize = counts.iter().sum();
        let shifted: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &f)| if i < k { f - tau * (counts[i] as f64 / total as f64).ln() } else { f })
            .collect();
        let manual = softmax(&shifted)?;
        outlier_err = outlier_err.max(p.iter().zip(&manual).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        outlier_err = outlier_err.max((calib.priors[k] - 1.0).abs());

        let i = rng.index(k);
        let s = outlier_sensitivity(&logits, &calib, i)?;
        sign_ok &= s < 0.0;
        let numeric = finite_diff_grad(
            |f: &[f64]| {
                let mut full = logits.clone();
                full[i] = f[0];
                calibrate(&full, &calib).map_or(f64::NAN, |q| q[k])
            },
            &[logits[i]],
            FD_STEP,
        )?[0];
        fd_err = fd_err.max((numeric - s).abs());

        // equal logits, smaller prior → larger sensitivity magnitude
        let mut tied = logits.clone();
        let (a, b) = (0, 1);
        tied[b] = tied[a];
        let mut c = counts.clone();
        c[a] = 1 + rng.index(200);
        c[b] = c[a] + 1 + rng.index(200);
        let cal = estimate_priors(&c)?.with_tau(uniform_in(0.1, 3.0, &mut rng));
        order_ok &= outlier_sensitivity(&tied, &cal, a)?.abs() > outlier_sensitivity(&tied, &cal, b)?.abs();
    }
    Ok(vec![
        CheckOutcome::new("calibration: probabilities sum to 1", norm_err <= 1e-12, format!("max err {norm_err:.2e}")),
        CheckOutcome::new("calibration: tau = 0 equals softmax", softmax_err <= 1e-12, format!("max err {softmax_err:.2e}")),
        CheckOutcome::new("calibration: outlier prior is 1", outlier_err <= 1e-12, format!("max err {outlier_err:.2e}")),
        CheckOutcome::new("calibration: sensitivity is negative", sign_ok, format!("{draws} draws")),
        CheckOutcome::new("calibration: smaller prior, larger sensitivity", order_ok, format!("{draws} draws")),
        CheckOutcome::new("calibration: sensitivity matches FD", fd_err <= 1e-6, format!("max err {fd_err:.2e}")),
    ])
}

/// Pairwise AUROC, ties counted as one half.
pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood {
        for &i in id {
            wins += if o > i {
                1.0
            } else if o == i {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// Mean over positives of the precision at that positive's score, where a
/// threshold admits every sample scoring at least as "positive".
pub fn brute_ap(pos: &[f64], neg: &[f64], higher_is_positive: bool) -> f64 {
    let admits = |s: f64, t: f64| if higher_is_positive { s >= t } else { s <= t };
    pos.iter()
        .map(|&t| {
            let tp = pos.iter().filter(|&&s| admits(s, t)).count();
            let fp = neg.iter().filter(|&&s| admits(s, t)).count();
            tp as f64 / (tp + fp) as f64
        })
        .sum::<f64>()
        / pos.len() as f64
}

/// The smallest ID score accepting at least 95% of ID samples; the fraction
/// of OOD scores at or below it.
pub fn brute_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let need = (0.95 * id.len() as f64 - 1e-9).ceil() as usize;
    let threshold = id
        .iter()
        .copied()
        .filter(|&t| id.iter().filter(|&&s| s <= t).count() >= need)
        .fold(f64::INFINITY, f64::min);
    ood.iter().filter(|&&s| s <= threshold).count() as f64 / ood.len() as f64
}

/// Largest absolute gap between the crate's metrics and the brute-force
/// definitions over `sets` random score sets (half of them tie-heavy).
pub fn metric_oracle_check(sets: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::for_stream(seed, 3000);
    let mut worst = 0.0f64;
    for s in 0..sets {
        let n_id = 1 + rng.index(100);
        let n_ood = 1 + rng.index(100);
        let draw = |rng: &mut Rng| {
            if s % 2 == 0 {
                rng.index(6) as f64 / 5.0
            } else {
                rng.uniform()
            }
        };
        let id: Vec<f64> = (0..n_id).map(|_| draw(&mut rng)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(&mut rng) + 0.1 * rng.uniform().round()).collect();
        let samples: Vec<ScoredSample> = id
            .iter()
            .map(|&v| ScoredSample::id_score(v))
            .chain(ood.iter().map(|&v| ScoredSample::ood(v)))
            .collect();
        let gaps = [
            auroc(&samples)? - brute_auroc(&id, &ood),
            average_precision(&samples, Positive::Ood)? - brute_ap(&ood, &id, true),
            average_precision(&samples, Positive::Id)? - brute_ap(&id, &ood, false),
            fpr_at_tpr(&samples, 0.95)? - brute_fpr95(&id, &ood),
        ];
        worst = gaps.iter().fold(worst, |w, g| w.max(g.abs()));
    }
    Ok(worst)
}

/// Every diagnostic at a size that runs in a few seconds.
pub fn selfcheck() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for target in GradTarget::ALL {
        let name = format!("gradient: {}", target.name());
        out.push(match gradient_check(target, 20, 11) {
            Ok(err) => CheckOutcome::new(&name, err < GRAD_TOLERANCE, format!("max relative error {err:.2e}")),
            Err(e) => CheckOutcome::new(&name, false, e.to_string()),
        });
    }
    match calibration_checks(200, 12) {
        Ok(c) => out.extend(c),
        Err(e) => out.push(CheckOutcome::new("calibration", false, e.to_string())),
    }
    out.push(match metric_oracle_check(100, 13) {
        Ok(gap) => CheckOutcome::new("metrics: brute-force oracles", gap <= 1e-12, format!("max gap {gap:.2e}")),
        Err(e) => CheckOutcome::new("metrics: brute-force oracles", false, e.to_string()),
    });
    out
}
