//! Run configuration files: `[section]` headers and `key = value` lines.
//!
//! `[model]` keys address the model hyperparameters by dotted path
//! (`decoder.hidden = 32`) on top of the preset named by `preset`, which is
//! applied first wherever it appears. `[train]` keys are [`TrainConfig`]
//! fields and `[data]` keys are [`DataConfig`] fields. `#` starts a comment
//! line. Unknown sections and keys are errors.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TrainConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::net::{ModelConfig, Preset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Size of the generated corpus when training on synthetic data.
    pub synthetic_utts: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic_utts: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            model: ModelConfig::preset(train.preset, Vocab::default().len()),
            train,
            data: DataConfig::default(),
        }
    }
}

struct Line<'a> {
    no: usize,
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

fn lex(text: &str) -> Result<Vec<Line<'_>>> {
    let mut section = "";
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim();
            if !matches!(section, "model" | "train" | "data") {
                return Err(Error::UnknownConfigKey {
                    key: format!("[{section}]"),
                    line: no,
                });
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::BadConfigValue {
            key: line.to_string(),
            line: no,
            msg: "expected `key = value`".into(),
        })?;
        if section.is_empty() {
            return Err(Error::BadConfigValue {
                key: key.trim().to_string(),
                line: no,
                msg: "key outside of a section".into(),
            });
        }
        out.push(Line {
            no,
            section,
            key: key.trim(),
            value: value.trim().trim_matches('"'),
        });
    }
    Ok(out)
}

fn assign<T: Serialize + DeserializeOwned>(target: &mut T, line: &Line<'_>) -> Result<()> {
    let bad = |msg: String| Error::BadConfigValue {
        key: line.key.to_string(),
        line: line.no,
        msg,
    };
    let mut root = serde_json::to_value(&*target)?;
    let mut slot = &mut root;
    for part in line.key.split('.') {
        slot = match slot.as_object_mut().and_then(|m| m.get_mut(part)) {
            Some(s) => s,
            None => {
                return Err(Error::UnknownConfigKey {
                    key: format!("{}.{}", line.section, line.key),
                    line: line.no,
                })
            }
        };
    }
    let v = line.value;
    *slot = match slot {
        Value::Bool(_) => Value::Bool(
            v.parse()
                .map_err(|_| bad(format!("`{v}` is not a boolean")))?,
        ),
        Value::Number(n) if n.is_u64() => Value::from(
            v.parse::<u64>()
                .map_err(|_| bad(format!("`{v}` is not a non-negative integer")))?,
        ),
        Value::Number(_) => {
            let x: f64 = v
                .parse()
                .map_err(|_| bad(format!("`{v}` is not a number")))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| bad(format!("`{v}` is not finite")))?
        }
        Value::String(_) => Value::String(v.to_string()),
        _ => return Err(bad("not a scalar setting".into())),
    };
    *target = serde_json::from_value(root).map_err(|e| bad(e.to_string()))?;
    Ok(())
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let lines = lex(text)?;
    let mut cfg = RunConfig::default();
    if let Some(l) = lines
        .iter()
        .find(|l| l.section == "model" && l.key == "preset")
    {
        let preset: Preset = l.value.parse().map_err(|msg| Error::BadConfigValue {
            key: "preset".into(),
            line: l.no,
            msg,
        })?;
        cfg.train.preset = preset;
        cfg.model = ModelConfig::preset(preset, cfg.model.n_vocab);
    }
    for l in &lines {
        match l.section {
            "model" if l.key == "preset" => {}
            "model" => assign(&mut cfg.model, l)?,
            "train" if l.key == "preset" => {
                return Err(Error::UnknownConfigKey {
                    key: "train.preset".into(),
                    line: l.no,
                })
            }
            "train" => assign(&mut cfg.train, l)?,
            _ => assign(&mut cfg.data, l)?,
        }
    }
    cfg.model.sigma_min = cfg.train.sigma_min;
    cfg.train.validate()?;
    cfg.model.validate()?;
    Ok(cfg)
}
