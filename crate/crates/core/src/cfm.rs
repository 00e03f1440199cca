//! Optimal-transport conditional flow matching.
//!
//! Each datum `x1` is paired with a source draw `x0 ~ N(0, I)` and joined by
//! the straight path `φ_t = (1 − (1 − σ_min)t)·x0 + t·x1`, whose velocity
//! `u = x1 − (1 − σ_min)·x0` does not depend on `t`. The marginal
//! flow-matching objective is intractable; regressing a field onto this
//! conditional target has the same parameter gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::rng::{normals, stream, Purpose};

/// Flow time in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct FlowTime(f64);

impl FlowTime {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(Error::invalid("flow_time", format!("{t} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtCfmConfig {
    pub sigma_min: f64,
}

impl Default for OtCfmConfig {
    fn default() -> Self {
        Self { sigma_min: 1e-4 }
    }
}

impl OtCfmConfig {
    pub fn new(sigma_min: f64) -> Result<Self> {
        if (0.0..1.0).contains(&sigma_min) {
            Ok(Self { sigma_min })
        } else {
            Err(Error::invalid(
                "ot_cfm",
                format!("sigma_min {sigma_min} outside [0, 1)"),
            ))
        }
    }
}

/// A point on the conditional path and the target velocity there.
#[derive(Clone, Debug)]
pub struct PathSample<T> {
    pub t: FlowTime,
    pub x0: Tensor<T>,
    pub x_t: Tensor<T>,
    pub u_t: Tensor<T>,
}

/// `(1 − (1 − σ_min)t)·x0 + t·x1`.
pub fn ot_flow_point<T: Real>(
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    t: FlowTime,
    cfg: OtCfmConfig,
) -> Result<Tensor<T>> {
    let t = t.get();
    // Written as (1 − t) + σt so the coefficient is exactly 1 at t = 0 and σ at t = 1.
    let a = T::of((1.0 - t) + cfg.sigma_min * t);
    let tt = T::of(t);
    x0.zip_map(x1, "ot_flow_point", |a0, b1| a * a0 + tt * b1)
}

/// `x1 − (1 − σ_min)·x0`.
pub fn ot_target_field<T: Real>(
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    cfg: OtCfmConfig,
) -> Result<Tensor<T>> {
    let c = T::of(1.0 - cfg.sigma_min);
    x0.zip_map(x1, "ot_target_field", |a0, b1| b1 - c * a0)
}

/// Draws `t ~ U[0,1]` and `x0 ~ N(0, I)` for batch item `item`, from two
/// independent streams keyed on `seed`.
pub fn sample_path<T: Real>(
    x1: &Tensor<T>,
    seed: u64,
    item: usize,
    cfg: OtCfmConfig,
) -> Result<PathSample<T>> {
    let t = FlowTime::new(stream(seed, Purpose::FlowTime, item as u64).random_range(0.0..1.0))?;
    let mut rng = stream(seed, Purpose::Source, item as u64);
    let x0 = Tensor::new(x1.shape(), normals(&mut rng, x1.len()))?;
    let x_t = ot_flow_point(&x0, x1, t, cfg)?;
    let u_t = ot_target_field(&x0, x1, cfg)?;
    Ok(PathSample { t, x0, x_t, u_t })
}

/// Arguments handed to the vector-field network.
pub struct FieldArgs {
    pub x_t: Var,
    pub mu: Var,
    pub t: FlowTime,
    pub item: usize,
}

/// Sum over elements of `‖u_t − v_t(x_t | μ)‖²` for one item.
pub fn cfm_residual_sum<T, F>(
    g: &mut Graph<T>,
    path: &PathSample<T>,
    mu: Var,
    item: usize,
    field: &mut F,
) -> Result<Var>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &FieldArgs) -> Result<Var>,
{
    if g.shape(mu) != path.x_t.shape() {
        return Err(Error::shape("cfm_loss", path.x_t.shape(), g.shape(mu)));
    }
    let x_t = g.constant(path.x_t.clone());
    let args = FieldArgs {
        x_t,
        mu,
        t: path.t,
        item,
    };
    let v = field(g, &args)?;
    if g.shape(v) != path.u_t.shape() {
        return Err(Error::shape(
            "cfm_loss field output",
            g.shape(v),
            path.u_t.shape(),
        ));
    }
    let u = g.constant(path.u_t.clone());
    let r = g.sub(u, v)?;
    let r2 = g.square(r);
    Ok(g.sum(r2))
}

/// Valid length of a prefix mask row; errors if the row is not of the form 1…10…0.
pub fn prefix_len<T: Real>(row: &[T]) -> Result<usize> {
    let n = row.iter().take_while(|&&v| v == T::one()).count();
    if row[n..].iter().any(|&v| v != T::zero()) {
        return Err(Error::invalid(
            "mask",
            "mask rows must be a contiguous valid prefix of 0/1 values",
        ));
    }
    Ok(n)
}

/// OT-CFM loss over a padded batch.
///
/// `x1_batch` and `mu_batch` are `[B × n_mel × T]`, `mask` is `[B × T]`. The
/// result is the mean of the squared residual over every valid element.
/// The field is evaluated on each item's valid prefix.
pub fn cfm_loss<T, F>(
    g: &mut Graph<T>,
    x1_batch: &Tensor<T>,
    mu_batch: Var,
    mask: &Tensor<T>,
    cfg: OtCfmConfig,
    seed: u64,
    mut field: F,
) -> Result<Var>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &FieldArgs) -> Result<Var>,
{
    let xs = x1_batch.shape();
    if xs.len() != 3 || g.shape(mu_batch) != xs {
        return Err(Error::shape("cfm_loss", xs, g.shape(mu_batch)));
    }
    let (b, m, t) = (xs[0], xs[1], xs[2]);
    if mask.shape() != [b, t] {
        return Err(Error::shape("cfm_loss mask", mask.shape(), &[b, t]));
    }
    let lens = mask
        .data()
        .chunks(t.max(1))
        .take(b)
        .map(prefix_len)
        .collect::<Result<Vec<_>>>()?;
    let count: usize = lens.iter().sum::<usize>() * m;
    if count == 0 {
        return Err(Error::invalid("cfm_loss", "mask selects no elements"));
    }

    let mut terms = Vec::with_capacity(b);
    for (item, &len) in lens.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let x1 = crop_item(x1_batch, item, len)?;
        let mu_i = g.slice(mu_batch, 0, item, 1)?;
        let mu_i = g.reshape(mu_i, &[m, t])?;
        let mu_i = g.slice(mu_i, 1, 0, len)?;
        let path = sample_path(&x1, seed, item, cfg)?;
        terms.push(cfm_residual_sum(g, &path, mu_i, item, &mut field)?);
    }
    let mut total = terms[0];
    for &s in &terms[1..] {
        total = g.add(total, s)?;
    }
    Ok(g.scale(total, T::of(1.0 / count as f64)))
}

/// `[n_mel × len]` prefix of item `b` in a `[B × n_mel × T]` tensor.
pub(crate) fn crop_item<T: Real>(batch: &Tensor<T>, b: usize, len: usize) -> Result<Tensor<T>> {
    let s = batch.shape();
    let (m, t) = (s[1], s[2]);
    let base = b * m * t;
    let mut out = Vec::with_capacity(m * len);
    for c in 0..m {
        out.extend_from_slice(&batch.data()[base + c * t..base + c * t + len]);
    }
    Tensor::new([m, len], out)
}
