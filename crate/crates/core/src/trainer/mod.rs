//! Joint ID/OOD mini-batch training with adaptive updates and a cosine
//! learning-rate schedule, plus batched inference.

mod optim;

pub use optim::{apply_update, cosine_lr, Moments, Optimizer};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_into, predict_class, CalibrationParams, ScoreMethod};
use crate::datagen::{sample_batches, Datasets, HeadTail};
use crate::diffcore::{argmax, softmax_in_place, streams, DenseMatrix, Rng};
use crate::error::{CoclError, Result};
use crate::losses::{draw_negatives, total_loss, LossWeights, StepBatch, TcplForm};
use crate::model::{forward, init_params, init_prototypes, ModelConfig, ModelParams, PrototypeBank};
use crate::par::{map_indices, Mode};

/// Named bundles of training defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small-scale defaults for the synthetic benchmark.
    Desk,
    /// The published full-scale recipe: 100 epochs, batches 128/256.
    PaperAppendixB,
}

impl std::str::FromStr for Preset {
    type Err = CoclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-appendix-b" => Ok(Preset::PaperAppendixB),
            _ => Err(CoclError::config(format!(
                "unknown preset '{s}' (expected desk or paper-appendix-b)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to `⌈|ID train| / id_batch⌉` when absent.
    pub iterations_per_epoch: Option<usize>,
    pub lr0: f64,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    pub tcpl_form: TcplForm,
    pub id_batch: usize,
    pub ood_batch: usize,
    /// Set per run by the caller; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (epochs, id_batch, ood_batch) = match preset {
            Preset::Desk => (30, 64, 128),
            Preset::PaperAppendixB => (100, 128, 256),
        };
        Self {
            epochs,
            iterations_per_epoch: None,
            lr0: 1e-3,
            optimizer: Optimizer::adam(),
            weights: LossWeights::default(),
            tcpl_form: TcplForm::Negative,
            id_batch,
            ood_batch,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(CoclError::validation("lr0 must be finite and >= 0"));
        }
        if self.id_batch == 0 {
            return Err(CoclError::validation("id_batch must be positive"));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(CoclError::validation("iterations_per_epoch must be positive"));
        }
        self.weights.validate()
    }
}

/// Loss values recorded for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub l_ocl: f64,
    pub l_t: f64,
    pub l_h: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub bank: Option<PrototypeBank>,
    pub moments: Vec<Moments>,
    pub bank_moments: Moments,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    /// Fresh parameters, a prototype for every tail class when the tail term
    /// is enabled, and zeroed optimizer moments.
    pub fn init(model: &ModelConfig, groups: &HeadTail, weights: &LossWeights, seed: u64) -> Result<Self> {
        let params = init_params(model, &mut Rng::for_stream(seed, streams::PARAM_INIT))?;
        let bank = if weights.alpha > 0.0 {
            Some(if groups.tail.is_empty() {
                PrototypeBank::empty(model.embed_dim)
            } else {
                init_prototypes(&groups.tail, model.embed_dim, &mut Rng::for_stream(seed, streams::PROTO_INIT))?
            })
        } else {
            None
        };
        let moments = params.tensors().iter().map(|t| Moments::zeros(t.len())).collect();
        let bank_moments = Moments::zeros(bank.as_ref().map_or(0, |b| b.m.data().len()));
        Ok(Self {
            params,
            bank,
            moments,
            bank_moments,
            iteration: 0,
            history: Vec::new(),
        })
    }
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { m })
}

/// One gradient evaluation of the combined objective and one update of
/// every learnable. Prototype rows are renormalized afterwards.
pub fn train_step(
    state: &mut TrainState,
    batch: &StepBatch,
    groups: &HeadTail,
    config: &TrainConfig,
    lr: f64,
) -> Result<LossRecord> {
    let iteration = state.iteration;
    let out = total_loss(
        &state.params,
        state.bank.as_ref(),
        batch,
        groups,
        &config.weights,
        config.tcpl_form,
    )
    .map_err(|e| match e {
        CoclError::Numeric(msg) => CoclError::numeric(format!("iteration {iteration}: {msg}")),
        other => other,
    })?;
    let names = state.params.tensor_names();
    for (name, g) in names.iter().zip(&out.param_grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoclError::numeric(format!(
                "iteration {iteration}: non-finite gradient in {name} (max finite |grad| {:.3e}, losses {:?})",
                max_abs(g),
                out.breakdown
            )));
        }
    }
    if let Some(g) = &out.bank_grad {
        if !g.all_finite() {
            return Err(CoclError::numeric(format!(
                "iteration {iteration}: non-finite prototype gradient (max finite |grad| {:.3e})",
                max_abs(g.data())
            )));
        }
    }

    let step = iteration as u64 + 1;
    for ((param, grad), mom) in state
        .params
        .tensors_mut()
        .into_iter()
        .zip(&out.param_grads)
        .zip(state.moments.iter_mut())
    {
        apply_update(&config.optimizer, param, grad, mom, lr, step);
    }
    if let (Some(bank), Some(g)) = (state.bank.as_mut(), out.bank_grad.as_ref()) {
        apply_update(&config.optimizer, bank.m.data_mut(), g.data(), &mut state.bank_moments, lr, step);
        if lr > 0.0 {
            bank.normalize_rows();
        }
    }

    let b = out.breakdown;
    let record = LossRecord {
        iteration,
        lr,
        l_ocl: b.ocl,
        l_t: b.tcpl,
        l_h: b.dhcl,
        total: b.total,
    };
    state.history.push(record);
    state.iteration += 1;
    Ok(record)
}

/// Trains from scratch on `data`.
pub fn fit(model: &ModelConfig, config: &TrainConfig, data: &Datasets) -> Result<TrainState> {
    fit_with(model, config, data, |_, _| {})
}

/// As [`fit`], calling `on_epoch(epoch, state)` after each completed epoch.
pub fn fit_with(
    model: &ModelConfig,
    config: &TrainConfig,
    data: &Datasets,
    mut on_epoch: impl FnMut(usize, &TrainState),
) -> Result<TrainState> {
    config.validate()?;
    model.validate()?;
    if model.num_id_classes != data.spec.num_classes || model.input_dim != data.spec.input_dim {
        return Err(CoclError::config("model and dataset disagree on classes or input width"));
    }
    let mut state = TrainState::init(model, &data.groups, &config.weights, config.seed)?;
    if config.epochs == 0 {
        return Ok(state);
    }
    let ood_batch = config.ood_batch.min(data.aux_ood.len());
    let id_batch = config.id_batch.min(data.id_train.len());
    let mut stream = sample_batches(
        &data.id_train,
        &data.aux_ood,
        id_batch,
        ood_batch,
        Rng::for_stream(config.seed, streams::BATCHES),
    )?;
    let mut neg_rng = Rng::for_stream(config.seed, streams::NEGATIVES);
    let per_epoch = config.iterations_per_epoch.unwrap_or_else(|| stream.batches_per_epoch());
    let total = config.epochs * per_epoch;
    let labels = data.id_train.labels.as_ref().expect("ID split has labels");
    for epoch in 0..config.epochs {
        for _ in 0..per_epoch {
            let (id_idx, ood_idx) = stream.next_indices();
            let mut batch = StepBatch {
                id_inputs: data.id_train.inputs.select_rows(&id_idx),
                id_labels: id_idx.iter().map(|&i| labels[i]).collect(),
                ood_inputs: data.aux_ood.inputs.select_rows(&ood_idx),
                negatives: Vec::new(),
            };
            if config.weights.beta > 0.0 {
                let pool = batch.id_labels.iter().filter(|&&y| data.groups.is_head(y)).count();
                batch.negatives = draw_negatives(ood_idx.len(), pool, &mut neg_rng);
            }
            let lr = cosine_lr(state.iteration, total, config.lr0);
            train_step(&mut state, &batch, &data.groups, config, lr)?;
        }
        on_epoch(epoch, &state);
    }
    Ok(state)
}

/// Per-row inference results.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Calibrated probabilities (k + 1 columns), or the plain k-way softmax
    /// for [`ScoreMethod::MspOe`].
    pub probs: DenseMatrix,
    pub predicted: Vec<usize>,
    pub ood_scores: Vec<f64>,
}

const INFER_CHUNK: usize = 256;

/// Forward pass, calibration and scoring. With [`ScoreMethod::OclRaw`] the
/// probabilities are uncalibrated (`τ = 0`); predictions take the argmax
/// over the ID positions of `probs`.
pub fn infer(params: &ModelParams, inputs: &DenseMatrix, calib: &CalibrationParams, method: ScoreMethod, mode: Mode) -> Result<Inference> {
    let k = params.config.num_id_classes;
    let expected = if method == ScoreMethod::MspOe { k } else { k + 1 };
    if params.config.num_logits() != expected {
        return Err(CoclError::shape(format!(
            "{method:?} scoring needs {expected} logits, model has {}",
            params.config.num_logits()
        )));
    }
    if method != ScoreMethod::MspOe && calib.priors.len() != k + 1 {
        return Err(CoclError::shape("calibration priors do not match the model"));
    }
    let effective = match method {
        ScoreMethod::OclRaw => calib.clone().with_tau(0.0),
        _ => calib.clone(),
    };
    let n = inputs.rows();
    let chunks = n.div_ceil(INFER_CHUNK);
    let parts = map_indices(mode, chunks, |c| -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
        let rows: Vec<usize> = (c * INFER_CHUNK..((c + 1) * INFER_CHUNK).min(n)).collect();
        let logits = forward(params, &inputs.select_rows(&rows))?.logits;
        let mut probs = vec![0.0; rows.len() * expected];
        let mut predicted = Vec::with_capacity(rows.len());
        let mut scores = Vec::with_capacity(rows.len());
        for (r, out) in probs.chunks_mut(expected).enumerate() {
            let f = logits.row(r);
            if method == ScoreMethod::MspOe {
                out.copy_from_slice(f);
                softmax_in_place(out);
                let best = argmax(out);
                predicted.push(best);
                scores.push(1.0 - out[best]);
            } else {
                calibrate_into(f, &effective, out)?;
                predicted.push(predict_class(out, false));
                scores.push(out[k]);
            }
        }
        Ok((probs, predicted, scores))
    });
    let mut probs = Vec::with_capacity(n * expected);
    let mut predicted = Vec::with_capacity(n);
    let mut ood_scores = Vec::with_capacity(n);
    for part in parts {
        let (p, pr, s) = part?;
        probs.extend(p);
        predicted.extend(pr);
        ood_scores.extend(s);
    }
    Ok(Inference {
        probs: DenseMatrix::new(n, expected, probs)?,
        predicted,
        ood_scores,
    })
}

pub const HISTORY_HEADER: &str = "iteration,lr,L_OCL,L_t,L_h,total";

/// Loss history as CSV with header [`HISTORY_HEADER`].
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.iteration, r.lr, r.l_ocl, r.l_t, r.l_h, r.total);
    }
    out
}

pub fn write_history(history: &[LossRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| CoclError::io(path, e))
}
