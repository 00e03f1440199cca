use rand::Rng;

use super::vocab::Vocab;
use super::Utterance;
use crate::align::Durations;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{normals, stream, Purpose};

pub const MIN_TOKENS: usize = 2;
pub const MAX_TOKENS: usize = 8;
pub const MIN_DURATION: usize = 2;
pub const MAX_DURATION: usize = 6;
pub const NOISE_STD: f32 = 0.05;

/// A generated corpus together with the per-token signatures that produced it.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub utterances: Vec<Utterance>,
    /// `[n_mel × vocab_size]`; column `i` is the signature of token `i`.
    pub signatures: Tensor<f32>,
}

impl SynthCorpus {
    pub fn signature(&self, token: usize) -> Vec<f32> {
        self.signatures.column(token)
    }
}

/// Utterances of 2–8 tokens. Token `i` of an utterance is held for a duration
/// drawn from 2–6 frames, each frame its signature plus N(0, 0.05²) noise.
/// Tokens come from ids `1..vocab_size` (id 0 only if it is the whole
/// vocabulary) and never repeat back to back.
pub fn synth_corpus(
    n_utts: usize,
    vocab_size: usize,
    n_mel: usize,
    seed: u64,
) -> Result<SynthCorpus> {
    if n_utts == 0 || vocab_size == 0 || n_mel == 0 {
        return Err(Error::invalid(
            "synth_corpus",
            "n_utts, vocab_size and n_mel must be >= 1",
        ));
    }
    let mut sig_rng = stream(seed, Purpose::Corpus, u64::MAX);
    let signatures = Tensor::new(
        [n_mel, vocab_size],
        normals::<f32>(&mut sig_rng, n_mel * vocab_size),
    )?;
    let vocab = Vocab::default();
    let (lo, hi) = if vocab_size > 1 {
        (1, vocab_size)
    } else {
        (0, 1)
    };

    let mut utterances = Vec::with_capacity(n_utts);
    for u in 0..n_utts {
        let mut rng = stream(seed, Purpose::Corpus, u as u64);
        let n = rng.random_range(MIN_TOKENS..=MAX_TOKENS);
        let mut tokens: Vec<usize> = Vec::with_capacity(n);
        while tokens.len() < n {
            let t = rng.random_range(lo..hi);
            if hi - lo > 1 && tokens.last() == Some(&t) {
                continue;
            }
            tokens.push(t);
        }
        let d: Vec<usize> = (0..n)
            .map(|_| rng.random_range(MIN_DURATION..=MAX_DURATION))
            .collect();
        let total: usize = d.iter().sum();
        let noise = normals::<f32>(&mut rng, n_mel * total);
        let mut frames = Tensor::zeros([n_mel, total]);
        let mut j = 0;
        for (&tok, &dur) in tokens.iter().zip(&d) {
            for _ in 0..dur {
                for c in 0..n_mel {
                    let k = c * total + j;
                    frames.data_mut()[k] = signatures.at2(c, tok) + NOISE_STD * noise[k];
                }
                j += 1;
            }
        }
        let text = vocab.detokenize(&tokens);
        utterances.push(Utterance::new(
            format!("utt{u:05}"),
            text,
            tokens,
            frames,
            Some(Durations::new(d)?),
        )?);
    }
    Ok(SynthCorpus {
        utterances,
        signatures,
    })
}
