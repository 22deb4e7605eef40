//! Training objectives and their analytic gradients.
//!
//! Class indices are zero-based throughout: ID classes are `0..k` and the
//! outlier class is `k`.

mod classification;
mod head;
mod tail;
mod total;

pub use classification::{cross_entropy_rows, ocl_loss, oe_loss, OeLossOutput};
pub use head::{dhcl_loss, draw_negatives, farthest_positives, select_triplet, DhclOutput, TripletSelection};
pub use tail::{tcpl_loss, TcplForm, TcplOutput};
pub use total::{total_loss, LossBreakdown, StepBatch, TotalLossOutput};

use serde::{Deserialize, Serialize};

use crate::diffcore::DenseMatrix;
use crate::error::{CoclError, Result};

/// Weights and shape parameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the auxiliary-outlier term.
    pub gamma: f64,
    /// Weight of the tail prototype term.
    pub alpha: f64,
    /// Weight of the head margin term.
    pub beta: f64,
    /// Contrastive temperature.
    pub temperature: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            alpha: 0.05,
            beta: 0.1,
            temperature: 0.07,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta), ("margin", self.margin)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoclError::validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CoclError::validation(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Where a training row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Id,
    AuxOod,
}

/// Rows with labels: ID rows carry their class, auxiliary OOD rows carry the
/// outlier label `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub origin: Vec<Origin>,
}

impl LabeledBatch {
    pub fn id(inputs: DenseMatrix, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(CoclError::shape("one label per row required"));
        }
        check_labels(&labels, k)?;
        let origin = vec![Origin::Id; labels.len()];
        Ok(Self { inputs, labels, origin })
    }

    pub fn aux_ood(inputs: DenseMatrix, k: usize) -> Self {
        let n = inputs.rows();
        Self {
            inputs,
            labels: vec![k; n],
            origin: vec![Origin::AuxOod; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(y) => Err(CoclError::validation(format!(
            "label {y} out of range for {num_classes} classes"
        ))),
        None => Ok(()),
    }
}
