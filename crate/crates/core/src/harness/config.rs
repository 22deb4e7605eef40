use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::ScoreMethod;
use crate::datagen::{DatasetSpec, OodKind};
use crate::error::{CoclError, Result};
use crate::model::{Activation, ModelConfig};
use crate::trainer::{Preset, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// k-way head, auxiliary outliers pushed to uniform.
    Oe,
    /// Extra outlier class; all toggles off unless given.
    Ocl,
    /// Extra outlier class; all toggles on unless given.
    Cocl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Oe => "OE",
            Method::Ocl => "OCL",
            Method::Cocl => "COCL",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CoclError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oe" => Ok(Method::Oe),
            "ocl" => Ok(Method::Ocl),
            "cocl" => Ok(Method::Cocl),
            _ => Err(CoclError::config(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub tcpl: bool,
    pub dhcl: bool,
    pub olc: bool,
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        tcpl: false,
        dhcl: false,
        olc: false,
    };
    pub const ALL: Toggles = Toggles {
        tcpl: true,
        dhcl: true,
        olc: true,
    };

    pub fn any(self) -> bool {
        self.tcpl || self.dhcl || self.olc
    }
}

/// Network shape; input width and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let m = ModelConfig::new(1, 2);
        Self {
            hidden_dims: m.hidden_dims,
            embed_dim: m.embed_dim,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = CoclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(CoclError::config(format!("unknown report format '{s}' (expected csv or json)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub format: ReportFormat,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub preset: Preset,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub method: Method,
    /// `None` takes the method's defaults.
    pub toggles: Option<Toggles>,
    /// Calibration strength used when logit calibration is on.
    pub tau: f64,
    pub seeds: Vec<u64>,
    pub ood_sets: Vec<OodKind>,
    /// Let the outlier position win the ID accuracy argmax.
    pub acc_include_outlier: bool,
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::preset(preset),
            method: Method::Cocl,
            toggles: None,
            tau: 1.0,
            seeds: vec![0, 1, 2, 3, 4],
            ood_sets: OodKind::ALL.to_vec(),
            acc_include_outlier: false,
            output: OutputSpec::default(),
        }
    }

    /// Parses a config document. Keys absent from the document come from
    /// the preset named by `preset_override`, else by the document's own
    /// `preset` key, else `desk`.
    pub fn from_json_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| CoclError::config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = &user else {
            return Err(CoclError::config("config must be a JSON object"));
        };
        match map.get("schema_version") {
            None => return Err(CoclError::config("missing schema_version")),
            Some(v) if v.as_u64() != Some(SCHEMA_VERSION as u64) => {
                return Err(CoclError::config(format!(
                    "unsupported schema_version {v} (expected {SCHEMA_VERSION})"
                )));
            }
            Some(_) => {}
        }
        let preset = match (preset_override, map.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| CoclError::config(format!("preset: {e}")))?,
            (None, None) => Preset::Desk,
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        merge(&mut merged, user);
        merged["preset"] = serde_json::to_value(preset).expect("preset serializes");
        let cfg: Self = serde_json::from_value(merged).map_err(|e| CoclError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoclError::io(path, e))?;
        Self::from_json_str(&text, preset_override).map_err(|e| match e {
            CoclError::Config(message) => CoclError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn toggles(&self) -> Toggles {
        self.toggles.unwrap_or(match self.method {
            Method::Oe | Method::Ocl => Toggles::NONE,
            Method::Cocl => Toggles::ALL,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CoclError::config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.method == Method::Oe && self.toggles().any() {
            return Err(CoclError::config("method oe cannot enable tcpl, dhcl or olc"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(CoclError::config("tau must be finite and >= 0"));
        }
        if self.seeds.is_empty() {
            return Err(CoclError::config("seeds must be non-empty"));
        }
        if self.ood_sets.is_empty() {
            return Err(CoclError::config("ood_sets must be non-empty"));
        }
        let mut sets = self.ood_sets.clone();
        sets.sort();
        sets.dedup();
        if sets.len() != self.ood_sets.len() {
            return Err(CoclError::config("ood_sets contains duplicates"));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        self.model_config(true).validate()
    }

    pub fn model_config(&self, outlier_class: bool) -> ModelConfig {
        ModelConfig {
            input_dim: self.dataset.input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            num_id_classes: self.dataset.num_classes,
            embed_dim: self.model.embed_dim,
            activation: self.model.activation,
            outlier_class,
        }
    }

    /// Settings actually used for one method/toggle combination.
    pub fn effective(&self, method: Method, toggles: Toggles) -> Result<Effective> {
        if method == Method::Oe && toggles.any() {
            return Err(CoclError::config("method oe cannot enable tcpl, dhcl or olc"));
        }
        let mut train = self.train.clone();
        if !toggles.tcpl {
            train.weights.alpha = 0.0;
        }
        if !toggles.dhcl {
            train.weights.beta = 0.0;
        }
        let (score, tau) = match (method, toggles.olc) {
            (Method::Oe, _) => (ScoreMethod::MspOe, 0.0),
            (_, false) => (ScoreMethod::OclRaw, 0.0),
            (_, true) => (ScoreMethod::CoclCalibrated, self.tau),
        };
        Ok(Effective {
            method,
            toggles,
            model: self.model_config(method != Method::Oe),
            train,
            tau,
            score,
        })
    }
}

/// Resolved settings for one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Effective {
    pub method: Method,
    pub toggles: Toggles,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tau: f64,
    pub score: ScoreMethod,
}

/// Overlays `patch` on `base`. Objects merge key by key, except objects with a
/// `kind` tag, which replace the base value whole so that switching variants
/// does not inherit the old variant's fields.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (key, value) in p {
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}
