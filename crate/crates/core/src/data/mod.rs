//! Tokenization, tensor files, manifests, synthetic corpora and batching.

mod manifest;
mod mtf;
mod synth;
mod vocab;

pub use manifest::{
    frames_path, load_corpus, load_entry, parse_manifest, read_manifest, write_corpus,
    ManifestEntry,
};
pub use mtf::{decode_tensor, encode_tensor, read_tensor_file, write_tensor_file, MAGIC, MAX_RANK};
pub use synth::{
    synth_corpus, SynthCorpus, MAX_DURATION, MAX_TOKENS, MIN_DURATION, MIN_TOKENS, NOISE_STD,
};
pub use vocab::{Vocab, UNK};

use rand::seq::SliceRandom;

use crate::align::Durations;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub tokens: Vec<usize>,
    /// `[n_mel × T]`.
    pub frames: Tensor<f32>,
    pub true_durations: Option<Durations>,
}

impl Utterance {
    pub fn new(
        id: String,
        text: String,
        tokens: Vec<usize>,
        frames: Tensor<f32>,
        true_durations: Option<Durations>,
    ) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::invalid(
                "utterance",
                format!("{id}: frames must be [n_mel x T], got {:?}", frames.shape()),
            ));
        }
        if tokens.is_empty() || frames.dim(1) < tokens.len() {
            return Err(Error::invalid(
                "utterance",
                format!(
                    "{id}: need T >= N >= 1, got T={} N={}",
                    frames.dim(1),
                    tokens.len()
                ),
            ));
        }
        if let Some(d) = &true_durations {
            if d.len() != tokens.len() || d.total() != frames.dim(1) {
                return Err(Error::invalid(
                    "utterance",
                    format!("{id}: durations do not partition the frames"),
                ));
            }
        }
        Ok(Self {
            id,
            text,
            tokens,
            frames,
            true_durations,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn n_mel(&self) -> usize {
        self.frames.dim(0)
    }
}

/// Padded minibatch. Padded positions are zero in every tensor and zero in the masks.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Corpus index of each row.
    pub indices: Vec<usize>,
    /// `B` rows padded with id 0 to the longest token sequence.
    pub tokens: Vec<Vec<usize>>,
    /// `[B × N_max]`.
    pub token_mask: Tensor<f32>,
    /// `[B × n_mel × T_max]`.
    pub frames: Tensor<f32>,
    /// `[B × T_max]`.
    pub frame_mask: Tensor<f32>,
    pub token_lengths: Vec<usize>,
    pub frame_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_utterances(utts: &[Utterance], indices: &[usize]) -> Result<Self> {
        let first = indices
            .first()
            .ok_or_else(|| Error::invalid("batch", "no items"))?;
        let m = utts[*first].n_mel();
        let items: Vec<&Utterance> = indices.iter().map(|&i| &utts[i]).collect();
        if let Some(u) = items.iter().find(|u| u.n_mel() != m) {
            return Err(Error::shape("batch n_mel", &[m], &[u.n_mel()]));
        }
        let b = items.len();
        let n_max = items.iter().map(|u| u.tokens.len()).max().unwrap_or(0);
        let t_max = items.iter().map(|u| u.n_frames()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(b);
        let mut token_mask = Tensor::zeros([b, n_max]);
        let mut frames = Tensor::zeros([b, m, t_max]);
        let mut frame_mask = Tensor::zeros([b, t_max]);
        for (r, u) in items.iter().enumerate() {
            let mut row = u.tokens.clone();
            row.resize(n_max, 0);
            tokens.push(row);
            token_mask.data_mut()[r * n_max..r * n_max + u.tokens.len()].fill(1.0);
            let t = u.n_frames();
            frame_mask.data_mut()[r * t_max..r * t_max + t].fill(1.0);
            for c in 0..m {
                let dst = (r * m + c) * t_max;
                frames.data_mut()[dst..dst + t]
                    .copy_from_slice(&u.frames.data()[c * t..(c + 1) * t]);
            }
        }
        Ok(Self {
            indices: indices.to_vec(),
            tokens,
            token_mask,
            frames,
            frame_mask,
            token_lengths: items.iter().map(|u| u.tokens.len()).collect(),
            frame_lengths: items.iter().map(|u| u.n_frames()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_mel(&self) -> usize {
        self.frames.dim(1)
    }

    /// Valid `[n_mel × T_b]` frames and token ids of row `b`.
    pub fn item(&self, b: usize) -> Result<(Tensor<f32>, &[usize])> {
        let frames = crate::cfm::crop_item(&self.frames, b, self.frame_lengths[b])?;
        Ok((frames, &self.tokens[b][..self.token_lengths[b]]))
    }

    /// Overwrites every padded frame value with NaN.
    pub fn poison_padding(&mut self) {
        let (m, t_max) = (self.frames.dim(1), self.frames.dim(2));
        for (r, &t) in self.frame_lengths.iter().enumerate() {
            for c in 0..m {
                let base = (r * m + c) * t_max;
                self.frames.data_mut()[base + t..base + t_max].fill(f32::NAN);
            }
        }
    }
}

/// Shuffles the corpus with `seed` and cuts it into batches of `batch_size`;
/// the last batch holds the remainder.
pub fn make_batches(utts: &[Utterance], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if utts.is_empty() {
        return Err(Error::invalid("make_batches", "empty corpus"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("make_batches", "batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut stream(seed, Purpose::Shuffle, 0));
    order
        .chunks(batch_size)
        .map(|c| Batch::from_utterances(utts, c))
        .collect()
}
