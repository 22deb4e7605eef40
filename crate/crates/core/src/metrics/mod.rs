//! OOD-detection and classification metrics.
//!
//! Scores are "higher = more OOD". Ties are handled by grouping equal scores:
//! AUROC counts a tied ID/OOD pair as one half, average precision advances
//! recall and precision once per group of equal scores, and the FPR threshold
//! admits every sample that ties with it.

use serde::{Deserialize, Serialize};

use crate::datagen::ClassGroup;
use crate::error::{CoclError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub ood_score: f64,
    pub is_ood: bool,
    pub id_label: Option<usize>,
    pub predicted_label: Option<usize>,
    pub group: Option<ClassGroup>,
}

impl ScoredSample {
    pub fn ood(score: f64) -> Self {
        Self {
            ood_score: score,
            is_ood: true,
            id_label: None,
            predicted_label: None,
            group: None,
        }
    }

    pub fn id(score: f64, label: usize, predicted: usize, group: ClassGroup) -> Self {
        Self {
            ood_score: score,
            is_ood: false,
            id_label: Some(label),
            predicted_label: Some(predicted),
            group: Some(group),
        }
    }

    /// ID sample carrying only a score.
    pub fn id_score(score: f64) -> Self {
        Self {
            ood_score: score,
            is_ood: false,
            id_label: None,
            predicted_label: None,
            group: None,
        }
    }
}

/// Positive class for average precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    Id,
    Ood,
}

fn split_scores(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for s in samples {
        if s.ood_score.is_nan() {
            return Err(CoclError::validation("NaN OOD score"));
        }
        if s.is_ood {
            ood.push(s.ood_score);
        } else {
            id.push(s.ood_score);
        }
    }
    if id.is_empty() || ood.is_empty() {
        return Err(CoclError::validation("need at least one ID and one OOD sample"));
    }
    id.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);
    Ok((id, ood))
}

/// Probability that an OOD sample outscores an ID sample, ties counting one
/// half, from a single merge of the two sorted lists.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (id, ood) = split_scores(samples)?;
    Ok(auroc_sorted(&id, &ood))
}

fn auroc_sorted(id: &[f64], ood: &[f64]) -> f64 {
    // twice the Mann-Whitney count, kept integral
    let mut twice: u128 = 0;
    let mut lo = 0;
    let mut hi = 0;
    for &s in ood {
        while lo < id.len() && id[lo] < s {
            lo += 1;
        }
        hi = hi.max(lo);
        while hi < id.len() && id[hi] <= s {
            hi += 1;
        }
        twice += 2 * lo as u128 + (hi - lo) as u128;
    }
    twice as f64 / (2.0 * id.len() as f64 * ood.len() as f64)
}

/// False positive rate of OOD samples at the threshold where `tpr_target` of
/// ID samples are accepted. ID samples are accepted when their score is at
/// or below the threshold; the threshold is the smallest ID score that
/// accepts at least `⌈tpr_target·n_id⌉` of them.
pub fn fpr_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(CoclError::validation("TPR target must lie in (0, 1]"));
    }
    let (id, ood) = split_scores(samples)?;
    Ok(fpr_sorted(&id, &ood, tpr_target))
}

fn fpr_sorted(id: &[f64], ood: &[f64], tpr_target: f64) -> f64 {
    let need = ((tpr_target * id.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = id[need.min(id.len()) - 1];
    let accepted = ood.partition_point(|&s| s <= threshold);
    accepted as f64 / ood.len() as f64
}

/// Step-wise area under the precision-recall curve, ranking positives
/// first: low scores when ID is positive, high scores when OOD is positive.
pub fn average_precision(samples: &[ScoredSample], positive: Positive) -> Result<f64> {
    split_scores(samples)?;
    let mut ranked: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| match positive {
            Positive::Ood => (s.ood_score, s.is_ood),
            Positive::Id => (-s.ood_score, !s.is_ood),
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = ranked.iter().filter(|r| r.1).count() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < ranked.len() {
        let score = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == score {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos;
        if recall > prev_recall {
            ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Fraction of ID samples whose prediction equals the label, optionally only
/// over one class group.
pub fn accuracy(samples: &[ScoredSample], restrict_to: Option<ClassGroup>) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for s in samples.iter().filter(|s| !s.is_ood) {
        if let Some(g) = restrict_to {
            match s.group {
                Some(sg) if sg == g => {}
                Some(_) => continue,
                None => return Err(CoclError::validation("ID sample without a class group")),
            }
        }
        let (Some(y), Some(p)) = (s.id_label, s.predicted_label) else {
            return Err(CoclError::validation("ID sample without label or prediction"));
        };
        total += 1;
        correct += usize::from(y == p);
    }
    if total == 0 {
        return Err(CoclError::validation("no ID samples in the requested group"));
    }
    Ok(correct as f64 / total as f64)
}

/// Detection metrics for one ID/OOD pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub ap_in: f64,
    pub ap_out: f64,
    pub fpr95: f64,
}

pub fn detection_metrics(samples: &[ScoredSample]) -> Result<DetectionMetrics> {
    let (id, ood) = split_scores(samples)?;
    Ok(DetectionMetrics {
        auroc: auroc_sorted(&id, &ood),
        ap_in: average_precision(samples, Positive::Id)?,
        ap_out: average_precision(samples, Positive::Ood)?,
        fpr95: fpr_sorted(&id, &ood, 0.95),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub ap_in: f64,
    pub ap_out: f64,
    pub fpr95: f64,
    pub acc: f64,
    /// Absent when there are no tail-class test rows.
    pub acc_tail: Option<f64>,
    pub head: Option<DetectionMetrics>,
    pub tail: Option<DetectionMetrics>,
}

/// Full metric set on all ID vs OOD, head ID vs OOD, and tail ID vs OOD.
pub fn split_eval(samples: &[ScoredSample]) -> Result<EvalReport> {
    if samples.iter().any(|s| !s.is_ood && s.group.is_none()) {
        return Err(CoclError::validation("every ID sample needs a class group"));
    }
    let all = detection_metrics(samples)?;
    let subset = |g: ClassGroup| -> Result<Option<DetectionMetrics>> {
        let rows: Vec<ScoredSample> = samples
            .iter()
            .filter(|s| s.is_ood || s.group == Some(g))
            .copied()
            .collect();
        if rows.iter().all(|s| s.is_ood) {
            return Ok(None);
        }
        detection_metrics(&rows).map(Some)
    };
    let has_tail = samples.iter().any(|s| s.group == Some(ClassGroup::Tail));
    Ok(EvalReport {
        auroc: all.auroc,
        ap_in: all.ap_in,
        ap_out: all.ap_out,
        fpr95: all.fpr95,
        acc: accuracy(samples, None)?,
        acc_tail: if has_tail { Some(accuracy(samples, Some(ClassGroup::Tail))?) } else { None },
        head: subset(ClassGroup::Head)?,
        tail: subset(ClassGroup::Tail)?,
    })
}
