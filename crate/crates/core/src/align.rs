//! Monotonic alignment search, prior and duration losses, and
//! duration-driven upsampling.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-domain offset added to target durations.
pub const DURATION_EPS: f64 = 1e-8;

/// Monotonic surjective map from frames to tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath {
    frame_to_token: Vec<usize>,
    n_tokens: usize,
}

impl AlignmentPath {
    pub fn new(frame_to_token: Vec<usize>, n_tokens: usize) -> Result<Self> {
        let ok = !frame_to_token.is_empty()
            && frame_to_token[0] == 0
            && *frame_to_token.last().unwrap() + 1 == n_tokens
            && frame_to_token
                .windows(2)
                .all(|w| w[1] == w[0] || w[1] == w[0] + 1);
        if !ok {
            return Err(Error::invalid(
                "alignment_path",
                format!("not a monotonic surjective path onto {n_tokens} tokens"),
            ));
        }
        Ok(Self {
            frame_to_token,
            n_tokens,
        })
    }

    pub fn frames(&self) -> &[usize] {
        &self.frame_to_token
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_frames(&self) -> usize {
        self.frame_to_token.len()
    }

    /// Sum of `log_lik[path(j), j]` over frames.
    pub fn score<T: Real>(&self, log_lik: &Tensor<T>) -> f64 {
        self.frame_to_token
            .iter()
            .enumerate()
            .map(|(j, &i)| log_lik.at2(i, j).f64())
            .sum()
    }

    /// One `frame_index token_index` line per frame.
    pub fn to_dump(&self) -> String {
        let mut s = String::with_capacity(self.frame_to_token.len() * 8);
        for (j, i) in self.frame_to_token.iter().enumerate() {
            let _ = writeln!(s, "{j} {i}");
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut frames = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let mut it = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|v| v.parse().ok()).ok_or_else(|| {
                    Error::invalid("alignment_dump", format!("line {}: `{line}`", n + 1))
                })
            };
            let (j, i) = (parse(it.next())?, parse(it.next())?);
            if j != frames.len() {
                return Err(Error::invalid(
                    "alignment_dump",
                    format!("line {}: frame {j} out of order", n + 1),
                ));
            }
            frames.push(i);
        }
        let n_tokens = frames.last().map_or(0, |&i| i + 1);
        Self::new(frames, n_tokens)
    }
}

/// Integer frame counts per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Durations(Vec<usize>);

impl Durations {
    pub fn new(d: Vec<usize>) -> Result<Self> {
        if d.is_empty() || d.iter().any(|&v| v < 1) {
            return Err(Error::invalid(
                "durations",
                format!("every duration must be >= 1, got {d:?}"),
            ));
        }
        Ok(Self(d))
    }

    /// Rounds each positive real duration up, clamping at 1.
    pub fn from_real(d: &[f64]) -> Result<Self> {
        Self::new(d.iter().map(|&v| (v.ceil().max(1.0)) as usize).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Token index of every output frame.
    pub fn frame_index(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect()
    }
}

/// `(i, j) = log N(frame_j; mu_i, I)`. `frames: [n_mel × T]`, `mu_tokens: [n_mel × N]`.
pub fn log_prior_matrix<T: Real>(frames: &Tensor<T>, mu_tokens: &Tensor<T>) -> Result<Tensor<T>> {
    if frames.rank() != 2 || mu_tokens.rank() != 2 || frames.dim(0) != mu_tokens.dim(0) {
        return Err(Error::shape(
            "log_prior_matrix",
            frames.shape(),
            mu_tokens.shape(),
        ));
    }
    let (m, t, n) = (frames.dim(0), frames.dim(1), mu_tokens.dim(1));
    let (y, mu) = (frames.data(), mu_tokens.data());
    let constant = -0.5 * LOG_2PI * m as f64;
    let mut out = vec![T::zero(); n * t];
    for i in 0..n {
        for j in 0..t {
            let mut sq = 0.0f64;
            for c in 0..m {
                let d = (y[c * t + j] - mu[c * n + i]).f64();
                sq += d * d;
            }
            out[i * t + j] = T::of(constant - 0.5 * sq);
        }
    }
    Tensor::new([n, t], out)
}

/// Maximum-likelihood monotonic surjective path through `log_lik: [N × T]`.
///
/// `Q[i,j] = log_lik[i,j] + max(Q[i−1,j−1], Q[i,j−1])`, backtracked from
/// `(N−1, T−1)`. Ties prefer the diagonal (advancing the token).
pub fn mas<T: Real>(log_lik: &Tensor<T>) -> Result<AlignmentPath> {
    if log_lik.rank() != 2 {
        return Err(Error::invalid(
            "mas",
            format!("needs a [N × T] matrix, got {:?}", log_lik.shape()),
        ));
    }
    let (n, t) = (log_lik.dim(0), log_lik.dim(1));
    if n == 0 {
        return Err(Error::invalid("mas", "no tokens"));
    }
    if t < n {
        return Err(Error::invalid(
            "mas",
            format!("{t} frames cannot cover {n} tokens"),
        ));
    }
    if let Some(p) = log_lik.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "mas",
            format!("non-finite log-likelihood at ({}, {})", p / t, p % t),
        ));
    }

    let ll = |i: usize, j: usize| log_lik.data()[i * t + j].f64();
    let neg = f64::NEG_INFINITY;
    let mut q = vec![neg; n * t];
    q[0] = ll(0, 0);
    for j in 1..t {
        // token i is reachable at frame j only if i <= j, and must still leave
        // room for the remaining tokens.
        let lo = (n + j).saturating_sub(t);
        let hi = (n - 1).min(j);
        for i in lo..=hi {
            let stay = q[i * t + j - 1];
            let advance = if i > 0 { q[(i - 1) * t + j - 1] } else { neg };
            q[i * t + j] = ll(i, j) + stay.max(advance);
        }
    }

    let mut path = vec![0usize; t];
    let mut i = n - 1;
    for j in (0..t).rev() {
        path[j] = i;
        if j > 0 && i > 0 && q[(i - 1) * t + j - 1] >= q[i * t + j - 1] {
            i -= 1;
        }
    }
    AlignmentPath::new(path, n)
}

pub fn durations_from_path(path: &AlignmentPath) -> Durations {
    let mut d = vec![0usize; path.n_tokens()];
    for &i in path.frames() {
        d[i] += 1;
    }
    Durations(d)
}

/// Repeats column `i` of `token_vectors: [C × N]` `d[i]` times.
pub fn upsample_by_durations<T: Real>(
    token_vectors: &Tensor<T>,
    d: &Durations,
) -> Result<Tensor<T>> {
    if token_vectors.rank() != 2 || token_vectors.dim(1) != d.len() {
        return Err(Error::shape(
            "upsample_by_durations",
            token_vectors.shape(),
            &[d.len()],
        ));
    }
    let (c, n) = (token_vectors.dim(0), token_vectors.dim(1));
    let idx = d.frame_index();
    let src = token_vectors.data();
    let mut out = Vec::with_capacity(c * idx.len());
    for ch in 0..c {
        out.extend(idx.iter().map(|&i| src[ch * n + i]));
    }
    Tensor::new([c, idx.len()], out)
}

fn valid_columns<T: Real>(
    mask: Option<&Tensor<T>>,
    len: usize,
    op: &'static str,
) -> Result<Vec<usize>> {
    match mask {
        None => Ok((0..len).collect()),
        Some(m) if m.len() == len => Ok((0..len).filter(|&j| m.data()[j] > T::zero()).collect()),
        Some(m) => Err(Error::shape(op, m.shape(), &[len])),
    }
}

/// Sum over valid elements of `−log N(y; μ, I)` and the number of elements summed.
pub fn prior_loss_sum<T: Real>(
    g: &mut Graph<T>,
    frames: &Tensor<T>,
    mu_aligned: Var,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, usize)> {
    if frames.shape() != g.shape(mu_aligned) || frames.rank() != 2 {
        return Err(Error::shape(
            "prior_loss",
            frames.shape(),
            g.shape(mu_aligned),
        ));
    }
    let (m, t) = (frames.dim(0), frames.dim(1));
    let cols = valid_columns(mask, t, "prior_loss mask")?;
    if cols.is_empty() {
        return Err(Error::invalid("prior_loss", "mask selects no frames"));
    }
    let y: Vec<T> = (0..m)
        .flat_map(|c| cols.iter().map(move |&j| (c, j)))
        .map(|(c, j)| frames.data()[c * t + j])
        .collect();
    let y = g.constant(Tensor::new([m, cols.len()], y)?);
    let mu = if cols.len() == t {
        mu_aligned
    } else {
        g.gather(mu_aligned, 1, &cols)?
    };
    let r = g.sub(y, mu)?;
    let r2 = g.square(r);
    let s = g.sum(r2);
    let s = g.scale(s, T::of(0.5));
    let count = m * cols.len();
    Ok((g.offset(s, T::of(0.5 * LOG_2PI * count as f64)), count))
}

/// Negative mean Gaussian log-density of the valid frames under the aligned means.
pub fn prior_loss<T: Real>(
    g: &mut Graph<T>,
    frames: &Tensor<T>,
    mu_aligned: Var,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let (s, count) = prior_loss_sum(g, frames, mu_aligned, mask)?;
    Ok(g.scale(s, T::of(1.0 / count as f64)))
}

/// Sum over valid tokens of `(log_d̂ − log(d + ε))²` and the token count.
pub fn duration_loss_sum<T: Real>(
    g: &mut Graph<T>,
    predicted_log_d: Var,
    target: &Durations,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, usize)> {
    let n = g.value(predicted_log_d).len();
    if n != target.len() {
        return Err(Error::shape(
            "duration_loss",
            g.shape(predicted_log_d),
            &[target.len()],
        ));
    }
    let cols = valid_columns(mask, n, "duration_loss mask")?;
    if cols.is_empty() {
        return Err(Error::invalid("duration_loss", "mask selects no tokens"));
    }
    let p = g.reshape(predicted_log_d, &[n])?;
    let p = if cols.len() == n {
        p
    } else {
        g.gather(p, 0, &cols)?
    };
    let log_d: Vec<T> = cols
        .iter()
        .map(|&i| T::of((target.as_slice()[i] as f64 + DURATION_EPS).ln()))
        .collect();
    let log_d = g.constant(Tensor::new([cols.len()], log_d)?);
    let r = g.sub(p, log_d)?;
    let r2 = g.square(r);
    Ok((g.sum(r2), cols.len()))
}

pub fn duration_loss<T: Real>(
    g: &mut Graph<T>,
    predicted_log_d: Var,
    target: &Durations,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let (s, count) = duration_loss_sum(g, predicted_log_d, target, mask)?;
    Ok(g.scale(s, T::of(1.0 / count as f64)))
}
