// SPDX-License-Identifier: Apache-2.0

//! Checkpoint files.
//!
//! Layout: the 8-byte magic `RIACKPT1`, a little-endian `u64` header length,
//! a JSON header, then every array's values as little-endian `f64` in the
//! order the header lists them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::ensure_parent;
use crate::error::{Result, RiaError};
use crate::model::{ClassifierModel, ModelConfig};
use crate::optim::{Optimizer, ResolvedOptimizer};

pub const MAGIC: &[u8; 8] = b"RIACKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    settings: ResolvedOptimizer,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    #[serde(default)]
    train_config: Option<serde_json::Value>,
    epoch: usize,
    step: usize,
    #[serde(default)]
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayEntry>,
}

/// Model parameters plus optional training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    /// Training configuration the model was produced with.
    pub train_config: Option<serde_json::Value>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub optimizer: Option<Optimizer>,
}

impl Checkpoint {
    pub fn from_model(model: &ClassifierModel) -> Self {
        Checkpoint {
            model_config: model.config().clone(),
            train_config: None,
            epoch: 0,
            step: 0,
            params: model.params().clone(),
            optimizer: None,
        }
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn to_model(&self) -> Result<ClassifierModel> {
        let mut model = ClassifierModel::build(&self.model_config).map_err(|e| RiaError::Checkpoint(e.to_string()))?;
        model.replace_params(self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<(String, &ArrayD<f64>)> =
            self.params.iter().map(|(k, v)| (format!("param/{k}"), v)).collect();
        if let Some(opt) = &self.optimizer {
            for (param, slots) in &opt.slots {
                for (slot, v) in slots {
                    arrays.push((format!("opt/{slot}/{param}"), v));
                }
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model_config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                settings: o.settings.clone(),
                steps: o.steps,
            }),
            arrays: arrays
                .iter()
                .map(|(n, a)| ArrayEntry {
                    name: n.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + arrays.iter().map(|(_, a)| a.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &arrays {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| RiaError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| err("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| RiaError::Checkpoint(format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(RiaError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        let mut data = &bytes[16 + len..];
        let mut params = BTreeMap::new();
        let mut slots: BTreeMap<String, BTreeMap<String, ArrayD<f64>>> = BTreeMap::new();
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 8 {
                return Err(err("truncated array data"));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked");
            if let Some(name) = entry.name.strip_prefix("param/") {
                params.insert(name.to_string(), array);
            } else if let Some(rest) = entry.name.strip_prefix("opt/") {
                let (slot, param) = rest.split_once('/').ok_or_else(|| err("bad optimizer array name"))?;
                slots.entry(param.to_string()).or_default().insert(slot.to_string(), array);
            } else {
                return Err(RiaError::Checkpoint(format!("unknown array {}", entry.name)));
            }
        }
        if !data.is_empty() {
            return Err(err("trailing bytes after array data"));
        }
        Ok(Checkpoint {
            model_config: header.model,
            train_config: header.train_config,
            epoch: header.epoch,
            step: header.step,
            params,
            optimizer: header.optimizer.map(|o| Optimizer {
                settings: o.settings,
                steps: o.steps,
                slots,
            }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        fs::write(path, self.to_bytes()?).map_err(|e| RiaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| RiaError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            RiaError::Checkpoint(m) => RiaError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads a checkpoint and checks that it holds a model of `template`.
    pub fn load_expecting(path: &Path, template: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model_config.template != template {
            return Err(RiaError::Checkpoint(format!(
                "{} holds a {} model, expected {template}",
                path.display(),
                ck.model_config.template
            )));
        }
        Ok(ck)
    }
}

/// Loads just the model from a checkpoint file.
pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    Checkpoint::load(path)?.to_model()
}
