use std::fmt::Write as _;

use super::report::fmt_metric;
use super::{split_rows, MetricRow, Split};
use crate::calibration::{calibrate, ood_score, predict_class, CalibrationParams, ScoreMethod};
use crate::datagen::HeadTail;
use crate::diffcore::{argmax, DenseMatrix};
use crate::error::{CoclError, Result};
use crate::metrics::ScoredSample;

/// Rows of an external logits file: `logit_0..logit_{m-1},label`, with an
/// empty label marking an OOD row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRows {
    pub logits: DenseMatrix,
    pub labels: Vec<Option<usize>>,
}

pub fn parse_logits_csv(text: &str) -> Result<LogitRows> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CoclError::validation("logits file is empty"))?
        .split(',')
        .map(str::trim)
        .collect();
    let m = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..m).map(|i| format!("logit_{i}")).chain(["label".to_string()]).collect();
    if m == 0 || header != expected {
        return Err(CoclError::validation("logits header must be logit_0..logit_{m-1},label"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = |what: &str| CoclError::validation(format!("logits line {}: {what}", n + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != m + 1 {
            return Err(bad("wrong number of fields"));
        }
        for f in &fields[..m] {
            data.push(f.parse::<f64>().map_err(|_| bad("bad logit"))?);
        }
        labels.push(match fields[m] {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad("bad label"))?),
        });
    }
    if labels.is_empty() {
        return Err(CoclError::validation("logits file has no rows"));
    }
    Ok(LogitRows {
        logits: DenseMatrix::new(labels.len(), m, data)?,
        labels,
    })
}

/// Scores external logits and evaluates them per split.
pub fn eval_logits(
    rows: &LogitRows,
    method: ScoreMethod,
    calib: &CalibrationParams,
    groups: &HeadTail,
    include_outlier: bool,
) -> Result<Vec<(Split, MetricRow)>> {
    calib.validate()?;
    let k = calib.num_id_classes();
    let samples = rows
        .labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let f = rows.logits.row(i);
            let score = ood_score(f, calib, method)?;
            Ok(match *label {
                None => ScoredSample::ood(score),
                Some(y) if y >= k => {
                    return Err(CoclError::validation(format!("label {y} is not an ID class (k = {k})")));
                }
                Some(y) => {
                    let predicted = match method {
                        ScoreMethod::MspOe => argmax(f),
                        ScoreMethod::OclRaw => predict_class(&calibrate(f, &calib.clone().with_tau(0.0))?, include_outlier),
                        ScoreMethod::CoclCalibrated => predict_class(&calibrate(f, calib)?, include_outlier),
                    };
                    ScoredSample::id(score, y, predicted, groups.group_of(y))
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    split_rows(&samples)
}

/// `split,AUC,AP-in,AP-out,FPR,ACC,ACC-t` with metrics at 4 decimals.
pub fn split_metrics_csv(rows: &[(Split, MetricRow)]) -> String {
    let mut out = String::from("split,AUC,AP-in,AP-out,FPR,ACC,ACC-t\n");
    for (split, m) in rows {
        out.push_str(split.name());
        for v in m.values() {
            let _ = write!(out, ",{}", fmt_metric(v.map(super::report::round4)));
        }
        out.push('\n');
    }
    out
}
