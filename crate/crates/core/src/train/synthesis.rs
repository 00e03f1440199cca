use crate::align::{log_prior_matrix, mas, upsample_by_durations, AlignmentPath, Durations};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::net::{decoder_forward, encoder_forward, Model};
use crate::numerics::{Graph, Tensor};
use crate::sampler::{euler_solve, sample_prior, SolveReport};

pub const DEFAULT_TEMPERATURE: f64 = 0.667;

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub tokens: Vec<usize>,
    pub durations: Durations,
    /// Upsampled encoder means `[n_mel × Σd]`.
    pub mu: Tensor<f32>,
    /// Generated frames `[n_mel × Σd]` with solver accounting.
    pub report: SolveReport<f32>,
}

impl Synthesis {
    pub fn frames(&self) -> &Tensor<f32> {
        &self.report.output
    }
}

/// Text to acoustic frames: encode, round predicted durations up, upsample the
/// means, draw the prior and integrate the decoder field with Euler steps.
pub fn synthesize(
    model: &Model<f32>,
    vocab: &Vocab,
    text: &str,
    n_steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<Synthesis> {
    let tokens = vocab.tokenize(text)?;
    synthesize_tokens(model, &tokens, n_steps, temperature, seed)
}

pub fn synthesize_tokens(
    model: &Model<f32>,
    tokens: &[usize],
    n_steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<Synthesis> {
    if n_steps < 1 {
        return Err(Error::invalid("synthesize", "n_steps must be >= 1"));
    }
    let (mu_x, log_d) = {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let enc = encoder_forward(&mut g, model, &p, tokens)?;
        (g.value(enc.mu).clone(), g.value(enc.log_durations).clone())
    };
    let real: Vec<f64> = log_d.data().iter().map(|&v| (v as f64).exp()).collect();
    let durations = Durations::from_real(&real)?;
    let mu = upsample_by_durations(&mu_x, &durations)?;
    let x0 = sample_prior::<f32>(mu.shape(), temperature, seed)?;
    let report = euler_solve(x0, n_steps, &mu, |x, t, cond| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mv = g.constant(cond.clone());
        let v = decoder_forward(&mut g, model, &p, xv, mv, t)?;
        Ok(g.value(v).clone())
    })?;
    Ok(Synthesis {
        tokens: tokens.to_vec(),
        durations,
        mu,
        report,
    })
}

/// Most likely monotonic alignment of `frames: [n_mel × T]` to the encoder
/// means of `tokens`.
pub fn align_frames(
    model: &Model<f32>,
    tokens: &[usize],
    frames: &Tensor<f32>,
) -> Result<AlignmentPath> {
    let mu = {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let enc = encoder_forward(&mut g, model, &p, tokens)?;
        g.value(enc.mu).clone()
    };
    mas(&log_prior_matrix(frames, &mu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ModelConfig, Preset};

    fn model() -> Model<f32> {
        Model::new(ModelConfig::preset(Preset::Toy, 36), 8).unwrap()
    }

    #[test]
    fn frame_count_and_nfe() {
        let m = model();
        let v = Vocab::default();
        for steps in [2, 4, 10] {
            let s = synthesize(&m, &v, "hi there", steps, DEFAULT_TEMPERATURE, 1).unwrap();
            assert_eq!(s.report.nfe, steps);
            assert_eq!(s.frames().shape(), &[20, s.durations.total()]);
            assert!(s.frames().all_finite());
        }
    }

    #[test]
    fn frame_count_is_ceil_of_predicted_durations() {
        let m = model();
        let toks = [3usize, 9, 1, 27];
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let enc = encoder_forward(&mut g, &m, &p, &toks).unwrap();
        let expect: usize = g
            .value(enc.log_durations)
            .data()
            .iter()
            .map(|&v| ((v as f64).exp().ceil() as usize).max(1))
            .sum();
        let s = synthesize_tokens(&m, &toks, 2, 0.5, 3).unwrap();
        assert_eq!(s.frames().dim(1), expect);
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = model();
        let v = Vocab::default();
        assert!(synthesize(&m, &v, "", 4, 0.667, 1).is_err());
        assert!(synthesize(&m, &v, "a", 0, 0.667, 1).is_err());
        assert!(synthesize(&m, &v, "a", 4, 0.0, 1).is_err());
    }

    #[test]
    fn same_seed_same_frames() {
        let m = model();
        let v = Vocab::default();
        let a = synthesize(&m, &v, "abc", 3, 0.667, 5).unwrap();
        let b = synthesize(&m, &v, "abc", 3, 0.667, 5).unwrap();
        assert_eq!(a.frames(), b.frames());
    }
}
