use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ReportFormat, SCHEMA_VERSION};
use super::{ResultRow, ResultTable};
use crate::error::{CoclError, Result};

/// Identity and settings columns, then the six metrics.
pub const REPORT_COLUMNS: [&str; 18] = [
    "cell", "method", "tcpl", "dhcl", "olc", "alpha", "beta", "tau", "score", "seed", "ood", "split", "AUC", "AP-in",
    "AP-out", "FPR", "ACC", "ACC-t",
];

/// One report line as written to disk: metrics rounded to 4 decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub cell: String,
    pub method: String,
    pub tcpl: bool,
    pub dhcl: bool,
    pub olc: bool,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub score: String,
    pub seed: String,
    pub ood: String,
    pub split: String,
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    #[serde(rename = "AP-in")]
    pub ap_in: Option<f64>,
    #[serde(rename = "AP-out")]
    pub ap_out: Option<f64>,
    #[serde(rename = "FPR")]
    pub fpr: Option<f64>,
    #[serde(rename = "ACC")]
    pub acc: Option<f64>,
    #[serde(rename = "ACC-t")]
    pub acc_t: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportDoc {
    schema_version: u32,
    columns: Vec<String>,
    rows: Vec<ReportRow>,
}

pub(crate) fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn score_name(s: crate::calibration::ScoreMethod) -> String {
    serde_json::to_value(s).expect("score serializes").as_str().expect("unit variant").to_string()
}

impl ReportRow {
    pub fn from_result(r: &ResultRow) -> Self {
        let s = &r.settings;
        let t = s.cell.toggles;
        let m = r.metrics.values().map(|v| v.filter(|x| !x.is_nan()).map(round4));
        Self {
            cell: s.cell.label(),
            method: s.cell.method.name().to_string(),
            tcpl: t.tcpl,
            dhcl: t.dhcl,
            olc: t.olc,
            alpha: s.alpha,
            beta: s.beta,
            tau: s.tau,
            score: score_name(s.score),
            seed: r.seed.to_string(),
            ood: r.ood.clone(),
            split: r.split.name().to_string(),
            auc: m[0],
            ap_in: m[1],
            ap_out: m[2],
            fpr: m[3],
            acc: m[4],
            acc_t: m[5],
        }
    }

    pub fn metrics(&self) -> [Option<f64>; 6] {
        [self.auc, self.ap_in, self.ap_out, self.fpr, self.acc, self.acc_t]
    }
}

pub(crate) fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Report text in the requested format.
pub fn render_report(table: &ResultTable, format: ReportFormat) -> Result<String> {
    if table.rows.is_empty() {
        return Err(CoclError::validation("cannot write an empty result table"));
    }
    let rows: Vec<ReportRow> = table.rows.iter().map(ReportRow::from_result).collect();
    Ok(match format {
        ReportFormat::Csv => {
            let mut out = REPORT_COLUMNS.join(",");
            out.push('\n');
            for r in &rows {
                let _ = write!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.cell, r.method, r.tcpl, r.dhcl, r.olc, r.alpha, r.beta, r.tau, r.score, r.seed, r.ood, r.split
                );
                for v in r.metrics() {
                    out.push(',');
                    out.push_str(&fmt_metric(v));
                }
                out.push('\n');
            }
            out
        }
        ReportFormat::Json => {
            let doc = ReportDoc {
                schema_version: SCHEMA_VERSION,
                columns: REPORT_COLUMNS.iter().map(|c| c.to_string()).collect(),
                rows,
            };
            let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
            text.push('\n');
            text
        }
    })
}

/// Writes `<dir>/<stem>.<ext>` and returns its path.
pub fn emit_report(table: &ResultTable, format: ReportFormat, dir: &Path, stem: &str) -> Result<PathBuf> {
    let text = render_report(table, format)?;
    std::fs::create_dir_all(dir).map_err(|e| CoclError::io(dir, e))?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    std::fs::write(&path, text).map_err(|e| CoclError::io(&path, e))?;
    Ok(path)
}

pub fn parse_json_report(text: &str) -> Result<Vec<ReportRow>> {
    let doc: ReportDoc = serde_json::from_str(text).map_err(|e| CoclError::validation(format!("report JSON: {e}")))?;
    if doc.columns != REPORT_COLUMNS {
        return Err(CoclError::validation("report JSON has unexpected columns"));
    }
    Ok(doc.rows)
}

pub fn parse_csv_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_COLUMNS.join(",").as_str()) {
        return Err(CoclError::validation("report CSV has an unexpected header"));
    }
    let bad = |n: usize, what: &str| CoclError::validation(format!("report CSV line {}: {what}", n + 2));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != REPORT_COLUMNS.len() {
                return Err(bad(n, "wrong number of fields"));
            }
            let flag = |s: &str| s.parse::<bool>().map_err(|_| bad(n, "bad flag"));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
            let metric = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(ReportRow {
                cell: f[0].into(),
                method: f[1].into(),
                tcpl: flag(f[2])?,
                dhcl: flag(f[3])?,
                olc: flag(f[4])?,
                alpha: num(f[5])?,
                beta: num(f[6])?,
                tau: num(f[7])?,
                score: f[8].into(),
                seed: f[9].into(),
                ood: f[10].into(),
                split: f[11].into(),
                auc: metric(f[12])?,
                ap_in: metric(f[13])?,
                ap_out: metric(f[14])?,
                fpr: metric(f[15])?,
                acc: metric(f[16])?,
                acc_t: metric(f[17])?,
            })
        })
        .collect()
}
