//! Experiment orchestration: configuration, the method/ablation grid,
//! multi-seed runs, result aggregation and report files.

mod check;
mod config;
mod eval;
mod report;

pub use check::{
    brute_ap, brute_auroc, brute_fpr95, calibration_checks, gradient_check, metric_oracle_check, selfcheck, CheckOutcome,
    GradTarget, GRAD_TOLERANCE,
};
pub use config::{Effective, ExperimentConfig, Method, ModelSpec, OutputSpec, ReportFormat, Toggles, SCHEMA_VERSION};
pub use eval::{eval_logits, parse_logits_csv, split_metrics_csv, LogitRows};
pub use report::{emit_report, parse_csv_report, parse_json_report, render_report, ReportRow, REPORT_COLUMNS};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{estimate_priors, predict_class, ScoreMethod};
use crate::datagen::{ClassGroup, Datasets, OodKind};
use crate::error::{CoclError, Result};
use crate::metrics::{accuracy, detection_metrics, ScoredSample};
use crate::model::{save_checkpoint, Checkpoint, ModelParams};
use crate::par::{map_indices, Mode};
use crate::trainer::{fit, infer, write_history, TrainState};

/// One method/toggle combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub method: Method,
    pub toggles: Toggles,
}

impl Cell {
    pub const fn new(method: Method, tcpl: bool, dhcl: bool, olc: bool) -> Self {
        Self {
            method,
            toggles: Toggles { tcpl, dhcl, olc },
        }
    }

    /// `OE`, `COCL`, or `OCL` followed by the enabled components.
    pub fn label(&self) -> String {
        let t = self.toggles;
        match self.method {
            Method::Oe => "OE".into(),
            _ if t == Toggles::ALL => "COCL".into(),
            _ => {
                let mut s = String::from("OCL");
                for (on, name) in [(t.tcpl, "TCPL"), (t.dhcl, "DHCL"), (t.olc, "OLC")] {
                    if on {
                        s.push('+');
                        s.push_str(name);
                    }
                }
                s
            }
        }
    }
}

/// The baseline followed by the six component ablations, in table order.
pub const ABLATION_GRID: [Cell; 7] = [
    Cell::new(Method::Oe, false, false, false),
    Cell::new(Method::Ocl, false, false, false),
    Cell::new(Method::Ocl, true, false, false),
    Cell::new(Method::Ocl, false, true, false),
    Cell::new(Method::Ocl, false, false, true),
    Cell::new(Method::Ocl, true, true, false),
    Cell::new(Method::Cocl, true, true, true),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Head,
    Tail,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Head => "head",
            Split::Tail => "tail",
        }
    }
}

/// The six reported metrics. Values are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub auc: f64,
    pub ap_in: f64,
    pub ap_out: f64,
    pub fpr: f64,
    pub acc: f64,
    /// Tail accuracy; absent on head rows and when there are no tail classes.
    pub acc_t: Option<f64>,
}

impl MetricRow {
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            Some(self.auc),
            Some(self.ap_in),
            Some(self.ap_out),
            Some(self.fpr),
            Some(self.acc),
            self.acc_t,
        ]
    }

    fn from_values(v: [Option<f64>; 6]) -> Self {
        let f = |x: Option<f64>| x.unwrap_or(f64::NAN);
        Self {
            auc: f(v[0]),
            ap_in: f(v[1]),
            ap_out: f(v[2]),
            fpr: f(v[3]),
            acc: f(v[4]),
            acc_t: v[5],
        }
    }
}

/// Metrics of one trained model on one OOD set (or the average over sets).
#[derive(Debug, Clone, PartialEq)]
pub struct OodEval {
    /// OOD set name, or `average`.
    pub ood: String,
    pub splits: Vec<(Split, MetricRow)>,
}

pub const AVERAGE: &str = "average";

/// Scores `params` on the ID test split against each requested OOD set and
/// appends the across-set average.
pub fn evaluate(
    params: &ModelParams,
    data: &Datasets,
    effective: &Effective,
    ood_sets: &[OodKind],
    include_outlier: bool,
    mode: Mode,
) -> Result<Vec<OodEval>> {
    let k = data.spec.num_classes;
    let calib = estimate_priors(&data.counts)?.with_tau(effective.tau);
    let id = infer(params, &data.id_test.inputs, &calib, effective.score, mode)?;
    let labels = data.id_test.labels.as_ref().expect("ID test split has labels");
    let id_samples: Vec<ScoredSample> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let predicted = if include_outlier && effective.score != ScoreMethod::MspOe {
                predict_class(id.probs.row(i), true)
            } else {
                id.predicted[i]
            };
            debug_assert!(predicted <= k);
            ScoredSample::id(id.ood_scores[i], y, predicted, data.groups.group_of(y))
        })
        .collect();

    let mut out = Vec::with_capacity(ood_sets.len() + 1);
    for &kind in ood_sets {
        let set = data
            .test_ood
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, s)| s)
            .ok_or_else(|| CoclError::config(format!("OOD set {kind} was not generated")))?;
        let scores = infer(params, &set.inputs, &calib, effective.score, mode)?.ood_scores;
        let mut samples = id_samples.clone();
        samples.extend(scores.into_iter().map(ScoredSample::ood));
        out.push(OodEval {
            ood: kind.name().to_string(),
            splits: split_rows(&samples)?,
        });
    }
    out.push(average_evals(&out));
    Ok(out)
}

fn split_rows(samples: &[ScoredSample]) -> Result<Vec<(Split, MetricRow)>> {
    let has = |g: ClassGroup| samples.iter().any(|s| s.group == Some(g));
    let tail_acc = if has(ClassGroup::Tail) {
        Some(accuracy(samples, Some(ClassGroup::Tail))?)
    } else {
        None
    };
    let row = |subset: &[ScoredSample], acc: f64, acc_t: Option<f64>| -> Result<MetricRow> {
        let d = detection_metrics(subset)?;
        Ok(MetricRow {
            auc: d.auroc,
            ap_in: d.ap_in,
            ap_out: d.ap_out,
            fpr: d.fpr95,
            acc,
            acc_t,
        })
    };
    let mut rows = vec![(Split::All, row(samples, accuracy(samples, None)?, tail_acc)?)];
    for (split, group) in [(Split::Head, ClassGroup::Head), (Split::Tail, ClassGroup::Tail)] {
        if !has(group) {
            continue;
        }
        let subset: Vec<ScoredSample> = samples
            .iter()
            .filter(|s| s.is_ood || s.group == Some(group))
            .copied()
            .collect();
        let acc = accuracy(samples, Some(group))?;
        let acc_t = (group == ClassGroup::Tail).then_some(acc);
        rows.push((split, row(&subset, acc, acc_t)?));
    }
    Ok(rows)
}

fn average_evals(evals: &[OodEval]) -> OodEval {
    let splits = evals[0]
        .splits
        .iter()
        .map(|&(split, _)| {
            let rows: Vec<MetricRow> = evals
                .iter()
                .map(|e| e.splits.iter().find(|(s, _)| *s == split).expect("same splits per set").1)
                .collect();
            (split, MetricRow::from_values(mean_std(&rows).0))
        })
        .collect();
    OodEval {
        ood: AVERAGE.to_string(),
        splits,
    }
}

/// Column-wise mean and sample standard deviation (`n - 1` denominator, zero
/// for a single row). A column with any absent value stays absent.
pub fn mean_std(rows: &[MetricRow]) -> ([Option<f64>; 6], [Option<f64>; 6]) {
    let mut mean = [None; 6];
    let mut std = [None; 6];
    let n = rows.len() as f64;
    for c in 0..6 {
        let vals: Option<Vec<f64>> = rows.iter().map(|r| r.values()[c]).collect();
        let Some(vals) = vals else { continue };
        if vals.is_empty() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean[c] = Some(m);
        std[c] = Some(var.sqrt());
    }
    (mean, std)
}

/// Per-seed result of one cell.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: Cell,
    pub seed: u64,
    pub effective: Effective,
    pub state: TrainState,
    pub evals: Vec<OodEval>,
}

/// Trains and evaluates one cell on one seed's data.
pub fn run_cell(config: &ExperimentConfig, cell: Cell, seed: u64, data: &Datasets, mode: Mode) -> Result<CellRun> {
    let mut effective = config.effective(cell.method, cell.toggles)?;
    effective.train.seed = seed;
    let state = fit(&effective.model, &effective.train, data)?;
    let evals = evaluate(&state.params, data, &effective, &config.ood_sets, config.acc_include_outlier, mode)?;
    Ok(CellRun {
        cell,
        seed,
        effective,
        state,
        evals,
    })
}

/// Row identity within a result table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedKey {
    Seed(u64),
    Mean,
    Std,
}

impl std::fmt::Display for SeedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeedKey::Seed(s) => write!(f, "{s}"),
            SeedKey::Mean => f.write_str("mean"),
            SeedKey::Std => f.write_str("std"),
        }
    }
}

/// Settings echoed next to every result row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSettings {
    pub cell: Cell,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub score: ScoreMethod,
}

impl CellSettings {
    fn of(cell: Cell, e: &Effective) -> Self {
        Self {
            cell,
            alpha: e.train.weights.alpha,
            beta: e.train.weights.beta,
            tau: e.tau,
            score: e.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub settings: CellSettings,
    pub seed: SeedKey,
    pub ood: String,
    pub split: Split,
    pub metrics: MetricRow,
}

/// Rows ordered by cell, then seeds followed by `mean` and `std`, then OOD
/// set (in configured order, `average` last), then split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Builds per-seed and aggregate rows from runs grouped by cell, each
    /// group in seed order.
    pub fn from_runs(runs: &[CellRun]) -> Self {
        let mut rows = Vec::new();
        let mut start = 0;
        while start < runs.len() {
            let cell = runs[start].cell;
            let end = start + runs[start..].iter().take_while(|r| r.cell == cell).count();
            let group = &runs[start..end];
            let settings = CellSettings::of(cell, &group[0].effective);
            for run in group {
                for e in &run.evals {
                    for &(split, metrics) in &e.splits {
                        rows.push(ResultRow {
                            settings,
                            seed: SeedKey::Seed(run.seed),
                            ood: e.ood.clone(),
                            split,
                            metrics,
                        });
                    }
                }
            }
            let mut means = Vec::new();
            let mut stds = Vec::new();
            for (oi, e) in group[0].evals.iter().enumerate() {
                for (si, &(split, _)) in e.splits.iter().enumerate() {
                    let per_seed: Vec<MetricRow> = group.iter().map(|r| r.evals[oi].splits[si].1).collect();
                    let (m, s) = mean_std(&per_seed);
                    for (target, key, values) in [(&mut means, SeedKey::Mean, m), (&mut stds, SeedKey::Std, s)] {
                        target.push(ResultRow {
                            settings,
                            seed: key,
                            ood: e.ood.clone(),
                            split,
                            metrics: MetricRow::from_values(values),
                        });
                    }
                }
            }
            rows.extend(means);
            rows.extend(stds);
            start = end;
        }
        Self { rows }
    }

    pub fn get(&self, label: &str, seed: SeedKey, ood: &str, split: Split) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.settings.cell.label() == label && r.seed == seed && r.ood == ood && r.split == split)
            .map(|r| &r.metrics)
    }
}

/// Runs `cells × config.seeds`. Data is generated once per seed and shared by
/// every cell; jobs run on the worker pool and are collected in cell-major,
/// seed-minor order.
pub fn run_cells(config: &ExperimentConfig, cells: &[Cell], mode: Mode) -> Result<Vec<CellRun>> {
    config.validate()?;
    for cell in cells {
        config.effective(cell.method, cell.toggles)?;
    }
    let seeds = &config.seeds;
    let data: Vec<Datasets> = map_indices(mode, seeds.len(), |i| Datasets::generate(&config.dataset, seeds[i]))
        .into_iter()
        .collect::<Result<_>>()?;
    let jobs = cells.len() * seeds.len();
    map_indices(mode, jobs, |j| {
        let (c, s) = (j / seeds.len(), j % seeds.len());
        run_cell(config, cells[c], seeds[s], &data[s], mode)
    })
    .into_iter()
    .collect()
}

/// The single cell described by the config's method and toggles.
pub fn config_cell(config: &ExperimentConfig) -> Cell {
    Cell {
        method: config.method,
        toggles: config.toggles(),
    }
}

pub fn run_experiment(config: &ExperimentConfig, mode: Mode) -> Result<(ResultTable, Vec<CellRun>)> {
    let runs = run_cells(config, &[config_cell(config)], mode)?;
    Ok((ResultTable::from_runs(&runs), runs))
}

pub fn run_ablation(config: &ExperimentConfig, mode: Mode) -> Result<ResultTable> {
    let runs = run_cells(config, &ABLATION_GRID, mode)?;
    Ok(ResultTable::from_runs(&runs))
}

/// Writes the loss history and a checkpoint for every run into `dir`.
pub fn write_run_artifacts(runs: &[CellRun], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoclError::io(dir, e))?;
    for run in runs {
        let stem = format!("{}_seed{}", run.cell.label(), run.seed);
        write_history(&run.state.history, &dir.join(format!("history_{stem}.csv")))?;
        let ckpt = Checkpoint {
            params: run.state.params.clone(),
            prototypes: run.state.bank.clone(),
        };
        save_checkpoint(&ckpt, &dir.join(format!("checkpoint_{stem}.json")))?;
    }
    Ok(())
}
