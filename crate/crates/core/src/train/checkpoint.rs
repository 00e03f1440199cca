//! Checkpoint files: `MTFC`, `u32` format version, `u64` header length, a JSON
//! header (configs, counters, tensor index), then the tensors as concatenated
//! `MTF1` records. All integers little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Adam, TrainConfig, TrainState};
use crate::data::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MTFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    bytes: u64,
}

/// The training RNG is counter-based, so its state is the seed plus the
/// number of completed updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub update: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    update: u64,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub update: u64,
    pub adam_step: u64,
    pub rng: RngState,
    /// `param/<name>`, `adam_m/<name>` and `adam_v/<name>` tensors.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, state: &TrainState) -> Self {
        let params = &state.model.params;
        let mut tensors = Vec::with_capacity(3 * params.len());
        for (name, t) in params.iter() {
            tensors.push((format!("param/{name}"), t.clone()));
        }
        for (prefix, moments) in [("adam_m", &state.adam.m), ("adam_v", &state.adam.v)] {
            for (name, t) in params.names().iter().zip(moments) {
                tensors.push((format!("{prefix}/{name}"), t.clone()));
            }
        }
        Self {
            model_config: state.model.config.clone(),
            train_config: config.clone(),
            update: state.update,
            adam_step: state.adam.step,
            rng: RngState {
                seed: config.seed,
                update: state.update,
            },
            tensors,
        }
    }

    fn lookup(&self) -> HashMap<&str, &Tensor<f32>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    fn fill(
        model: &mut Model<f32>,
        lookup: &HashMap<&str, &Tensor<f32>>,
        prefix: &str,
    ) -> Result<Vec<Tensor<f32>>> {
        let names = model.params.names().to_vec();
        names
            .iter()
            .map(|n| {
                let key = format!("{prefix}/{n}");
                let t = lookup
                    .get(key.as_str())
                    .ok_or(Error::MissingTensor(key.clone()))?;
                let want = model.params.by_name(n).expect("own name").shape();
                if t.shape() != want {
                    return Err(Error::shape("checkpoint tensor", t.shape(), want));
                }
                Ok((*t).clone())
            })
            .collect()
    }

    /// Rebuilds the model alone.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.model_config.clone(), self.train_config.seed)?;
        let values = Self::fill(&mut model, &self.lookup(), "param")?;
        for (n, t) in model.params.names().to_vec().iter().zip(values) {
            model.params.set(n, t)?;
        }
        Ok(model)
    }

    /// Rebuilds model, optimiser moments and update counter.
    pub fn restore(&self) -> Result<TrainState> {
        let mut model = self.model()?;
        let lookup = self.lookup();
        let m = Self::fill(&mut model, &lookup, "adam_m")?;
        let v = Self::fill(&mut model, &lookup, "adam_v")?;
        Ok(TrainState {
            model,
            adam: Adam {
                step: self.adam_step,
                m,
                v,
            },
            update: self.update,
        })
    }

    /// Errors on the first model hyperparameter that differs from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let mut want = Vec::new();
        flatten("", &serde_json::to_value(expected)?, &mut want);
        let mut have = Vec::new();
        flatten("", &serde_json::to_value(&self.model_config)?, &mut have);
        let have: HashMap<_, _> = have.into_iter().collect();
        for (key, w) in want {
            let h = have.get(&key).cloned().unwrap_or_else(|| "missing".into());
            if h != w {
                return Err(Error::ConfigMismatch {
                    key,
                    expected: w,
                    found: h,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let rec = encode_tensor(t);
            index.push(TensorEntry {
                name: name.clone(),
                offset: payload.len() as u64,
                bytes: rec.len() as u64,
            });
            payload.extend_from_slice(&rec);
        }
        let header = serde_json::to_vec(&Header {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            update: self.update,
            adam_step: self.adam_step,
            rng: self.rng,
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        if found != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let start = 16 + hlen;
        if bytes.len() < start {
            return Err(Error::Truncated {
                expected: start,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[16..start])?;
        let payload = &bytes[start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let (lo, hi) = (e.offset as usize, (e.offset + e.bytes) as usize);
            if hi > payload.len() {
                return Err(Error::Truncated {
                    expected: start + hi,
                    found: bytes.len(),
                });
            }
            let (t, used) = decode_tensor(&payload[lo..hi])?;
            if used != hi - lo {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("tensor {} has a bad length", e.name),
                ));
            }
            tensors.push((e.name, t));
        }
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            update: header.update,
            adam_step: header.adam_step,
            rng: header.rng,
            tensors,
        })
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
