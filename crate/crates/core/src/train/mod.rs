//! Joint prior / duration / OT-CFM training, checkpoints and synthesis.

mod adam;
mod checkpoint;
mod config;
mod synthesis;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{parse_config, DataConfig, RunConfig};
pub use synthesis::{align_frames, synthesize, synthesize_tokens, Synthesis, DEFAULT_TEMPERATURE};

use serde::{Deserialize, Serialize};

use crate::align::{duration_loss_sum, durations_from_path, log_prior_matrix, mas, prior_loss_sum};
use crate::cfm::{cfm_residual_sum, sample_path, OtCfmConfig};
use crate::data::{make_batches, Batch, Utterance};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::net::{decoder_forward, encoder_forward, Model, ModelConfig, Preset};
use crate::numerics::{Graph, Tensor};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_updates: u64,
    pub seed: u64,
    pub sigma_min: f64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub grad_clip: f64,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Toy,
            learning_rate: 1e-4,
            batch_size: 32,
            max_updates: 2000,
            seed: 0,
            sigma_min: 1e-4,
            checkpoint_every: 500,
            grad_clip: 1.0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train_config", "learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train_config", "batch_size must be >= 1"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::invalid("train_config", "grad_clip must be > 0"));
        }
        OtCfmConfig::new(self.sigma_min)?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate)
    }
}

/// Batch-mean loss terms of one update; `total` is their plain sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub prior: f64,
    pub duration: f64,
    pub cfm: f64,
    pub total: f64,
}

impl Losses {
    pub const CSV_HEADER: &'static str = "update,prior,duration,cfm,total";

    pub fn csv_row(&self, update: u64) -> String {
        format!(
            "{update},{},{},{},{}",
            self.prior, self.duration, self.cfm, self.total
        )
    }
}

/// Per-item hook applied to the log-likelihood matrix before alignment.
pub type LogLikHook<'a> = &'a (dyn Fn(usize, &mut Tensor<f32>) + Sync);

struct ItemOutput {
    grads: Vec<Tensor<f32>>,
    prior: f64,
    duration: f64,
    cfm: f64,
}

/// Loss terms and parameter gradients of one batch, without updating anything.
///
/// Each item gets its own graph; its sums are divided by the batch-wide
/// element counts so that the item losses add up to the batch means. Gradients
/// are reduced in item order.
pub fn batch_gradients(
    model: &Model<f32>,
    batch: &Batch,
    cfg: OtCfmConfig,
    seed: u64,
    exec: Exec,
    hook: Option<LogLikHook<'_>>,
) -> Result<(Losses, Vec<Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let m = batch.n_mel();
    if m != model.config.n_mel {
        return Err(Error::shape(
            "train_step n_mel",
            &[model.config.n_mel],
            &[m],
        ));
    }
    let frame_count: usize = batch.frame_lengths.iter().sum::<usize>() * m;
    let token_count: usize = batch.token_lengths.iter().sum();
    let inv_frames = 1.0 / frame_count as f64;
    let inv_tokens = 1.0 / token_count as f64;

    let outputs = exec.map_range(batch.len(), |i| -> Result<ItemOutput> {
        let (frames, tokens) = batch.item(i)?;
        let mut g = Graph::<f32>::new();
        let p = model.params.bind(&mut g, true);
        let enc = encoder_forward(&mut g, model, &p, tokens)?;
        let mut ll = log_prior_matrix(&frames, g.value(enc.mu))?;
        if let Some(h) = hook {
            h(i, &mut ll);
        }
        let path = mas(&ll)?;
        let durations = durations_from_path(&path);
        let mu_y = g.gather(enc.mu, 1, path.frames())?;

        let (prior, _) = prior_loss_sum(&mut g, &frames, mu_y, None)?;
        let (duration, _) = duration_loss_sum(&mut g, enc.log_durations, &durations, None)?;
        let sample = sample_path(&frames, seed, i, cfg)?;
        let cfm = cfm_residual_sum(&mut g, &sample, mu_y, i, &mut |g, a| {
            decoder_forward(g, model, &p, a.x_t, a.mu, a.t)
        })?;

        let prior = g.scale(prior, inv_frames as f32);
        let duration = g.scale(duration, inv_tokens as f32);
        let cfm = g.scale(cfm, inv_frames as f32);
        let s = g.add(prior, duration)?;
        let loss = g.add(s, cfm)?;
        let mut grads = g.backward(loss)?;
        Ok(ItemOutput {
            grads: p
                .vars()
                .iter()
                .map(|&v| grads.take(v).expect("param gradient"))
                .collect(),
            prior: g.value(prior).item() as f64,
            duration: g.value(duration).item() as f64,
            cfm: g.value(cfm).item() as f64,
        })
    });

    let mut losses = Losses::default();
    let mut total: Option<Vec<Tensor<f32>>> = None;
    for out in outputs {
        let out = out?;
        losses.prior += out.prior;
        losses.duration += out.duration;
        losses.cfm += out.cfm;
        match &mut total {
            None => total = Some(out.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&out.grads) {
                    a.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &g)| *a += g);
                }
            }
        }
    }
    losses.total = losses.prior + losses.duration + losses.cfm;
    for (term, v) in [
        ("prior", losses.prior),
        ("duration", losses.duration),
        ("cfm", losses.cfm),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term });
        }
    }
    Ok((losses, total.expect("non-empty batch")))
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: Adam,
    /// Number of completed updates.
    pub update: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, n_vocab: usize) -> Result<Self> {
        let mut mc = ModelConfig::preset(config.preset, n_vocab);
        mc.sigma_min = config.sigma_min;
        Self::from_model_config(mc, config.seed)
    }

    pub fn from_model_config(mc: ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::new(mc, seed)?;
        let adam = Adam::new(&model.params);
        Ok(Self {
            model,
            adam,
            update: 0,
        })
    }
}

/// One optimisation step: losses and gradients, global-norm clipping, Adam.
pub fn train_step(state: &mut TrainState, batch: &Batch, config: &TrainConfig) -> Result<Losses> {
    let cfg = OtCfmConfig::new(config.sigma_min)?;
    let seed = derive_seed(config.seed, state.update);
    let (losses, mut grads) = batch_gradients(&state.model, batch, cfg, seed, config.exec, None)?;
    clip_grad_norm(&mut grads, config.grad_clip);
    state
        .adam
        .update(config.adam(), &mut state.model.params, &grads);
    if !state.model.params.all_finite() {
        return Err(Error::NonFiniteLoss { term: "parameters" });
    }
    state.update += 1;
    Ok(losses)
}

/// Training loop over a fixed corpus. The batch for update `u` is a pure
/// function of `(seed, u)`: epoch `u / n_batches` is shuffled with its own
/// derived seed.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    corpus: Vec<Utterance>,
    epoch: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: Vec<Utterance>, n_vocab: usize) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(&config, n_vocab)?;
        Self::resume(config, corpus, state)
    }

    pub fn resume(config: TrainConfig, corpus: Vec<Utterance>, state: TrainState) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::invalid("trainer", "empty corpus"));
        }
        if let Some(u) = corpus
            .iter()
            .find(|u| u.n_mel() != state.model.config.n_mel)
        {
            return Err(Error::ConfigMismatch {
                key: "n_mel".into(),
                expected: state.model.config.n_mel.to_string(),
                found: format!("{} in utterance {}", u.n_mel(), u.id),
            });
        }
        Ok(Self {
            config,
            state,
            corpus,
            epoch: None,
        })
    }

    pub fn corpus(&self) -> &[Utterance] {
        &self.corpus
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.corpus.len().div_ceil(self.config.batch_size) as u64
    }

    fn batch_for(&mut self, update: u64) -> Result<&Batch> {
        let nb = self.batches_per_epoch();
        let epoch = update / nb;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let seed = derive_seed(self.config.seed ^ 0xE90C, epoch);
            self.epoch = Some((
                epoch,
                make_batches(&self.corpus, self.config.batch_size, seed)?,
            ));
        }
        Ok(&self.epoch.as_ref().expect("epoch").1[(update % nb) as usize])
    }

    pub fn step(&mut self) -> Result<Losses> {
        let update = self.state.update;
        let batch = self.batch_for(update)?.clone();
        train_step(&mut self.state, &batch, &self.config)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.state)
    }
}
