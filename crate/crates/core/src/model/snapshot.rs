//! Versioned JSON checkpoints.
//!
//! Every `f64` is stored as the 16 lowercase hex digits of its IEEE-754 bit
//! pattern, so a save/load round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Affine, ModelConfig, ModelParams, PrototypeBank};
use crate::diffcore::DenseMatrix;
use crate::error::{CoclError, Result};

pub const CHECKPOINT_FORMAT: &str = "cocl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub prototypes: Option<PrototypeBank>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    hex: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
    prototypes: Option<PrototypeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeRecord {
    tail_class_ids: Vec<usize>,
    matrix: TensorRecord,
}

fn encode(values: &[f64]) -> String {
    values.iter().map(|v| format!("{:016x}", v.to_bits())).collect()
}

fn decode(hex: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    if hex.len() != expected * 16 || !hex.is_ascii() {
        return Err(format!("expected {} hex digits, found {}", expected * 16, hex.len()));
    }
    (0..expected)
        .map(|i| {
            u64::from_str_radix(&hex[16 * i..16 * (i + 1)], 16)
                .map(f64::from_bits)
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn record(name: String, rows: usize, cols: usize, data: &[f64]) -> TensorRecord {
    TensorRecord {
        name,
        rows,
        cols,
        hex: encode(data),
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let mut tensors = Vec::new();
        let layers = p
            .encoder
            .iter()
            .chain([&p.classifier, &p.proj_hidden, &p.proj_out]);
        for (layer, names) in layers.zip(p.tensor_names().chunks(2)) {
            tensors.push(record(names[0].clone(), layer.w.rows(), layer.w.cols(), layer.w.data()));
            tensors.push(record(names[1].clone(), 1, layer.b.len(), &layer.b));
        }
        let prototypes = self.prototypes.as_ref().map(|bank| PrototypeRecord {
            tail_class_ids: bank.tail_class_ids.clone(),
            matrix: record("prototypes".into(), bank.m.rows(), bank.m.cols(), bank.m.data()),
        });
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: p.config.clone(),
            tensors,
            prototypes,
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                file.format, file.version
            ));
        }
        file.config.validate().map_err(|e| e.to_string())?;
        let cfg = file.config;
        let n_layers = cfg.hidden_dims.len() + 3;
        if file.tensors.len() != 2 * n_layers {
            return Err(format!("expected {} tensors, found {}", 2 * n_layers, file.tensors.len()));
        }
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden_dims);
        let pen = cfg.penultimate_dim();
        let mut shapes: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        shapes.extend([(pen, cfg.num_logits()), (pen, pen), (pen, cfg.embed_dim)]);

        let mut layers = Vec::with_capacity(n_layers);
        for (pair, &(fan_in, fan_out)) in file.tensors.chunks(2).zip(&shapes) {
            let (w, b) = (&pair[0], &pair[1]);
            if (w.rows, w.cols) != (fan_in, fan_out) || (b.rows, b.cols) != (1, fan_out) {
                return Err(format!("tensor {} has unexpected shape", w.name));
            }
            let wd = decode(&w.hex, fan_in * fan_out).map_err(|e| format!("{}: {e}", w.name))?;
            let bd = decode(&b.hex, fan_out).map_err(|e| format!("{}: {e}", b.name))?;
            layers.push(Affine {
                w: DenseMatrix::new(fan_in, fan_out, wd).map_err(|e| e.to_string())?,
                b: bd,
            });
        }
        let proj_out = layers.pop().expect("len checked");
        let proj_hidden = layers.pop().expect("len checked");
        let classifier = layers.pop().expect("len checked");
        let params = ModelParams {
            config: cfg,
            encoder: layers,
            classifier,
            proj_hidden,
            proj_out,
        };
        let prototypes = match file.prototypes {
            None => None,
            Some(rec) => {
                let m = &rec.matrix;
                let data = decode(&m.hex, m.rows * m.cols)?;
                let mat = DenseMatrix::new(m.rows, m.cols, data).map_err(|e| e.to_string())?;
                Some(PrototypeBank::new(mat, rec.tail_class_ids).map_err(|e| e.to_string())?)
            }
        };
        Ok(Self { params, prototypes })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_json()).map_err(|e| CoclError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| CoclError::io(path, e))?;
    Checkpoint::from_json(&text).map_err(|message| CoclError::Parse {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Rng;
    use crate::model::{init_params, init_prototypes};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::new(5, 4);
        let params = init_params(&cfg, &mut Rng::new(8)).unwrap();
        let bank = init_prototypes(&[2, 3], cfg.embed_dim, &mut Rng::new(9)).unwrap();
        let ckpt = Checkpoint {
            params,
            prototypes: Some(bank),
        };
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        let bits = |c: &Checkpoint| c.params.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ckpt), bits(&back));
        assert_eq!(ckpt, back);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let ckpt = Checkpoint {
            params: init_params(&ModelConfig::new(3, 2), &mut Rng::new(1)).unwrap(),
            prototypes: None,
        };
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

        assert!(matches!(load_checkpoint(&dir.path().join("nope.json")), Err(CoclError::Io { .. })));
        std::fs::write(&path, ckpt.to_json().replace("\"version\": 1", "\"version\": 9")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CoclError::Parse { .. })));
    }
}
