//! Text encoder, duration predictor and the U-Net flow-prediction decoder.

mod attention;
mod decoder;
mod encoder;
mod layers;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use attention::{attention_logits, rope_rotate, MultiHeadAttention};
pub(crate) use decoder::ResBlock;
pub use decoder::{decoder_forward, sinusoidal_embedding, time_embed, Decoder};
pub use encoder::{encoder_forward, encoder_forward_batch, Encoder, EncoderOutput};
pub use layers::snake_beta;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::rng::{stream, Purpose};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(format!("unknown preset `{other}` (expected toy or paper)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_channels: usize,
    pub ffn_kernel: usize,
    pub prenet_layers: usize,
    pub prenet_kernel: usize,
    pub dp_channels: usize,
    pub dp_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub attention_dim: usize,
    pub n_down: usize,
    pub n_mid: usize,
    pub n_up: usize,
    pub ffn_mult: usize,
    pub time_dim: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub n_vocab: usize,
    pub n_mel: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub sigma_min: f64,
}

impl ModelConfig {
    pub fn preset(preset: Preset, n_vocab: usize) -> Self {
        match preset {
            Preset::Toy => Self {
                preset,
                n_vocab,
                n_mel: 20,
                encoder: EncoderConfig {
                    channels: 64,
                    layers: 2,
                    heads: 2,
                    ffn_channels: 128,
                    ffn_kernel: 3,
                    prenet_layers: 2,
                    prenet_kernel: 5,
                    dp_channels: 64,
                    dp_kernel: 3,
                },
                decoder: DecoderConfig {
                    hidden: 64,
                    heads: 1,
                    attention_dim: 64,
                    n_down: 1,
                    n_mid: 1,
                    n_up: 1,
                    ffn_mult: 4,
                    time_dim: 64,
                    groups: 8,
                },
                sigma_min: 1e-4,
            },
            Preset::Paper => Self {
                preset,
                n_vocab,
                n_mel: 80,
                encoder: EncoderConfig {
                    channels: 192,
                    layers: 6,
                    heads: 2,
                    ffn_channels: 768,
                    ffn_kernel: 3,
                    prenet_layers: 3,
                    prenet_kernel: 5,
                    dp_channels: 256,
                    dp_kernel: 3,
                },
                decoder: DecoderConfig {
                    hidden: 256,
                    heads: 2,
                    attention_dim: 64,
                    n_down: 2,
                    n_mid: 2,
                    n_up: 2,
                    ffn_mult: 4,
                    time_dim: 1024,
                    groups: 8,
                },
                sigma_min: 1e-4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model_config", msg));
        let e = &self.encoder;
        let d = &self.decoder;
        let extents = [
            ("n_vocab", self.n_vocab),
            ("n_mel", self.n_mel),
            ("encoder.channels", e.channels),
            ("encoder.layers", e.layers),
            ("encoder.heads", e.heads),
            ("encoder.ffn_channels", e.ffn_channels),
            ("encoder.ffn_kernel", e.ffn_kernel),
            ("encoder.prenet_kernel", e.prenet_kernel),
            ("encoder.dp_channels", e.dp_channels),
            ("encoder.dp_kernel", e.dp_kernel),
            ("decoder.hidden", d.hidden),
            ("decoder.heads", d.heads),
            ("decoder.attention_dim", d.attention_dim),
            ("decoder.n_down", d.n_down),
            ("decoder.n_mid", d.n_mid),
            ("decoder.n_up", d.n_up),
            ("decoder.ffn_mult", d.ffn_mult),
            ("decoder.time_dim", d.time_dim),
            ("decoder.groups", d.groups),
        ];
        if let Some((k, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be >= 1"));
        }
        if !e.channels.is_multiple_of(e.heads) || !(e.channels / e.heads).is_multiple_of(2) {
            return bad(format!(
                "encoder channels {} must split into {} heads of even width",
                e.channels, e.heads
            ));
        }
        for (k, v) in [
            ("ffn_kernel", e.ffn_kernel),
            ("prenet_kernel", e.prenet_kernel),
            ("dp_kernel", e.dp_kernel),
        ] {
            if v % 2 == 0 {
                return bad(format!("encoder.{k} must be odd, got {v}"));
            }
        }
        if d.n_down != d.n_up {
            return bad(format!(
                "decoder needs n_down == n_up, got {} and {}",
                d.n_down, d.n_up
            ));
        }
        if d.heads * d.attention_dim > d.hidden * d.ffn_mult {
            return bad(format!(
                "decoder attention width {}x{} is inconsistent with hidden {}",
                d.heads, d.attention_dim, d.hidden
            ));
        }
        if !d.hidden.is_multiple_of(d.groups) {
            return bad(format!(
                "decoder hidden {} not divisible by {} groups",
                d.hidden, d.groups
            ));
        }
        if !d.hidden.is_multiple_of(2) || d.hidden < 4 {
            return bad(format!("decoder hidden {} must be even and >= 4", d.hidden));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return bad(format!("sigma_min {} outside [0, 1)", self.sigma_min));
        }
        Ok(())
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_index(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &*self.tensors[i])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter().map(|t| &**t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors())
    }

    /// Mutable access by position; clones the tensor if a graph still holds it.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    /// Replaces a tensor by name; the shape must match.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::shape(
                "param set",
                self.tensors[i].shape(),
                t.shape(),
            ));
        }
        self.tensors[i] = Arc::new(t);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Registers every tensor on `g`, as differentiable leaves if `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(Arc::clone(t))
                } else {
                    g.constant((**t).clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles of every parameter, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn count_params<T: Real>(params: &ParamStore<T>) -> usize {
    params.tensors().map(|t| t.len()).sum()
}

/// Creates parameters with fan-in scaled uniform weights and zero biases.
pub(crate) struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Builder<'a, T> {
    pub(crate) fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: stream(seed, Purpose::Init, 0),
        }
    }

    pub(crate) fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        use rand::Rng;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.random_range(-bound..=bound)))
            .collect();
        self.store
            .insert(name, Tensor::new(shape, data).expect("shape"))
    }

    pub(crate) fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub(crate) fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub(crate) fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::full(shape, T::one()))
    }
}

/// Encoder, duration predictor and decoder with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut b = Builder::new(&mut params, seed);
        let encoder = Encoder::build(&mut b, &config);
        let decoder = Decoder::build(&mut b, &config);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.params)
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_matrix_count() {
        let mut s = ParamStore::<f32>::default();
        s.insert("w", Tensor::zeros([3, 4]));
        assert_eq!(count_params(&s), 12);
    }

    #[test]
    fn toy_count_is_stable() {
        let a = Model::<f32>::new(ModelConfig::preset(Preset::Toy, 36), 1).unwrap();
        let b = Model::<f32>::new(ModelConfig::preset(Preset::Toy, 36), 2).unwrap();
        assert_eq!(a.count_params(), b.count_params());
        assert!(a.params.all_finite());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::preset(Preset::Toy, 36);
        c.decoder.n_up = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset(Preset::Toy, 36);
        c.encoder.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset(Preset::Toy, 36);
        c.n_mel = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::preset(Preset::Paper, 36).validate().is_ok());
    }
}
