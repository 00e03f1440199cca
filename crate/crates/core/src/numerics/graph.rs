//! Tape-style reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive applied through a [`Graph`] appends a node holding its
//! output value and whatever it needs for the backward rule. [`Graph::backward`]
//! walks the tape in exact reverse recording order. A graph is built for one
//! forward pass and dropped afterwards.

use std::sync::Arc;

use super::tensor::{gemm, gemm_nt, gemm_tn, numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Broadcast(usize),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        x: usize,
        axis: usize,
        index: Vec<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Silu(usize),
    Square(usize),
    SnakeBeta {
        x: usize,
        log_alpha: usize,
        log_beta: usize,
        axis: usize,
    },
    Rope {
        x: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Not `Sync`-shared: one graph per thread.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Splits `shape` around `axis` into `(outer, dim, inner)` extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Result shape of numpy-style broadcasting of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Calls `f(out_index, src_index)` for every element of `out_shape`, where
/// `src_shape` is broadcast into it.
fn for_each_broadcast(src_shape: &[usize], out_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    let pad = rank - src_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        let d = if i >= pad { src_shape[i - pad] } else { 1 };
        strides[i] = if d == 1 { 0 } else { s };
        s *= d;
    }
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..total {
        f(out, src);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            src += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, xs: &[usize]) -> bool {
        xs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable leaf sharing storage with the caller.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- broadcasting and elementwise binary ops -----

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs == shape {
            return Ok(x);
        }
        match broadcast_shape(&xs, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast", &xs, shape)),
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); numel(shape)];
        for_each_broadcast(&xs, shape, |o, i| out[o] = src[i]);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Broadcast(x.0), rg))
    }

    fn binary_operands(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let s = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(op, &sa, &sb))?;
        Ok((self.broadcast_to(a, &s)?, self.broadcast_to(b, &s)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_operands("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_operands("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_operands("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(v, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(&[x.0]);
        self.push(v, Op::Scale(x.0, c), rg)
    }

    /// `x + c` for a constant scalar `c`.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a + c);
        let rg = self.rg(&[x.0]);
        self.push(v, Op::Offset(x.0), rg)
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let m = t.sum() / T::of(t.len() as f64);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x.0), rg))
    }

    // ----- linear algebra and layout -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(v, Op::Transpose(x.0), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(v, Op::Reshape(x.0), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = around(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat { inputs: ids, axis },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, d, inner) = around(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
            rg,
        ))
    }

    /// `out[.., j, ..] = x[.., index[j], ..]` along `axis`.
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid(
                "gather",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[axis]) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} >= extent {}", s[axis]),
            ));
        }
        let (outer, d, inner) = around(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &j in index {
                let base = o * d * inner + j * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = index.len();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x: x.0,
                axis,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// 1-D convolution. `x: [C_in × T]`, `w: [C_out × C_in × K]`, `b: [C_out]`,
    /// symmetric zero padding `pad` on both sides.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be >= 1"));
        }
        let (cin, t) = (sx[0], sx[1]);
        let (cout, k) = (sw[0], sw[2]);
        if t + 2 * pad < k {
            return Err(Error::invalid(
                "conv1d",
                format!("kernel {k} longer than padded input {}", t + 2 * pad),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv1d bias", self.shape(b), &[cout]));
            }
        }
        let tout = (t + 2 * pad - k) / stride + 1;
        let ck = cin * k;
        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); ck * tout];
        for ci in 0..cin {
            for kk in 0..k {
                let row = &mut cols[(ci * k + kk) * tout..(ci * k + kk + 1) * tout];
                for (to, r) in row.iter_mut().enumerate() {
                    let pos = (to * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < t {
                        *r = xd[ci * t + pos as usize];
                    }
                }
            }
        }
        let mut out = gemm(self.value(w).data(), &cols, cout, ck, tout);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (co, row) in out.chunks_mut(tout).enumerate() {
                for v in row {
                    *v = *v + bd[co];
                }
            }
        }
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::new([cout, tout], out)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    // ----- normalisation -----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
        let mut out = t.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z = z + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x.0), rg))
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        if n == 0 {
            return Err(Error::invalid("layer_norm", "empty normalisation axis"));
        }
        let nf = T::of(n as f64);
        let mut xhat = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(xhat.len() / n);
        for row in xhat.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::of(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x.0]);
        let value = Tensor::new(shape, xhat.clone())?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
            },
            rg,
        ))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(v, op, rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x.0), T::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x.0), T::cos)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), T::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x.0), T::ln)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| v.max(T::zero()))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x.0), |v| v / (T::one() + (-v).exp()))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    // ----- fused activations and embeddings -----

    /// `x + sin²(αx)/(β + 1e-9)` with per-channel `α = exp(log_alpha)`,
    /// `β = exp(log_beta)` indexed along `axis`.
    pub fn snake_beta(
        &mut self,
        x: Var,
        log_alpha: Var,
        log_beta: Var,
        axis: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid(
                "snake_beta",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let c = s[axis];
        if self.value(log_alpha).len() != c || self.value(log_beta).len() != c {
            return Err(Error::shape("snake_beta", &s, self.shape(log_alpha)));
        }
        let (outer, _, inner) = around(&s, axis);
        let la = self.value(log_alpha).data();
        let lb = self.value(log_beta).data();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let eps = T::of(SNAKE_EPS);
        for o in 0..outer {
            for ch in 0..c {
                let alpha = la[ch].exp();
                let inv = T::one() / (lb[ch].exp() + eps);
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let sv = (alpha * xd[i]).sin();
                    out[i] = xd[i] + inv * sv * sv;
                }
            }
        }
        let rg = self.rg(&[x.0, log_alpha.0, log_beta.0]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::SnakeBeta {
                x: x.0,
                log_alpha: log_alpha.0,
                log_beta: log_beta.0,
                axis,
            },
            rg,
        ))
    }

    /// Rotary embedding over the last axis of `x: [.., L, d]`: the pair
    /// `(x[2i], x[2i+1])` at row `m` is rotated by `positions[m] · 10000^(−2i/d)`.
    pub fn rope(&mut self, x: Var, positions: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid(
                "rope",
                format!("needs rank >= 2, got {s:?}"),
            ));
        }
        let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
        if d % 2 != 0 {
            return Err(Error::invalid("rope", format!("head dimension {d} is odd")));
        }
        if positions.len() != l {
            return Err(Error::shape("rope", &s, &[positions.len()]));
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(l * half);
        let mut sin = Vec::with_capacity(l * half);
        for &m in positions {
            for i in 0..half {
                let theta = 10000f64.powf(-2.0 * i as f64 / d as f64);
                let (sn, cs) = (m * theta).sin_cos();
                cos.push(T::of(cs));
                sin.push(T::of(sn));
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for (r, (orow, xrow)) in out.chunks_mut(d).zip(xd.chunks(d)).enumerate() {
            let m = r % l;
            for i in 0..half {
                let (c, sn) = (cos[m * half + i], sin[m * half + i]);
                let (a, b) = (xrow[2 * i], xrow[2 * i + 1]);
                orow[2 * i] = a * c - b * sn;
                orow[2 * i + 1] = a * sn + b * c;
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(s, out)?, Op::Rope { x: x.0, cos, sin }, rg))
    }

    // ----- backward -----

    /// Propagates d(loss)/d(node) back through the tape. `loss` must be 0-dimensional.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if !ls.is_empty() {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(node.value.shape(), g).expect("gradient shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], idx: usize, g: Vec<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn val(&self, idx: usize) -> &Tensor<T> {
        &self.nodes[idx].value
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.val(idx);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.nodes[*a].requires_grad {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::Offset(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Broadcast(x) => {
                let xs = self.val(*x).shape();
                let mut gx = vec![T::zero(); numel(xs)];
                for_each_broadcast(xs, out.shape(), |o, i| gx[i] = gx[i] + g[o]);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.val(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                self.accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                if self.nodes[*a].requires_grad {
                    self.accumulate(grads, *a, gemm_nt(g, tb.data(), m, n, k));
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(grads, *b, gemm_tn(ta.data(), g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                let gt = Tensor::new(s, g.to_vec()).and_then(|t| t.transpose());
                self.accumulate(grads, *x, gt.expect("transpose grad").into_data());
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = around(out.shape(), *axis);
                let mut offset = 0;
                for &i in inputs {
                    let d = self.val(i).shape()[*axis];
                    if self.nodes[i].requires_grad {
                        let mut gi = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gi.extend_from_slice(&g[base..base + d * inner]);
                        }
                        self.accumulate(grads, i, gi);
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.val(*x).shape();
                let (outer, d, inner) = around(xs, *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = o * d * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, axis, index } => {
                let xs = self.val(*x).shape();
                let (outer, d, inner) = around(xs, *axis);
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    for (jo, &j) in index.iter().enumerate() {
                        let dst = o * d * inner + j * inner;
                        let src = (o * index.len() + jo) * inner;
                        for q in 0..inner {
                            gx[dst + q] = gx[dst + q] + g[src + q];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (cin, t) = (tx.dim(0), tx.dim(1));
                let (cout, k) = (tw.dim(0), tw.dim(2));
                let tout = out.dim(1);
                let ck = cin * k;
                if let Some(b) = b {
                    let gb = g
                        .chunks(tout)
                        .map(|row| row.iter().copied().sum())
                        .collect();
                    self.accumulate(grads, *b, gb);
                }
                if self.nodes[*w].requires_grad {
                    self.accumulate(grads, *w, gemm_nt(g, cols, cout, tout, ck));
                }
                if self.nodes[*x].requires_grad {
                    let gcols = gemm_tn(tw.data(), g, ck, cout, tout);
                    let mut gx = vec![T::zero(); cin * t];
                    for ci in 0..cin {
                        for kk in 0..k {
                            let row = &gcols[(ci * k + kk) * tout..(ci * k + kk + 1) * tout];
                            for (to, &v) in row.iter().enumerate() {
                                let pos = (to * stride + kk) as isize - *pad as isize;
                                if pos >= 0 && (pos as usize) < t {
                                    let p = ci * t + pos as usize;
                                    gx[p] = gx[p] + v;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().expect("rank >= 1");
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = *out.shape().last().expect("rank >= 1");
                let nf = T::of(n as f64);
                let mut gx = vec![T::zero(); g.len()];
                for (r, ((gr, xr), dst)) in g
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((d, &gv), &xv) in dst.iter_mut().zip(gr).zip(xr) {
                        *d = inv_std[r] * (gv - mg - xv * mgx);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sin(x) => {
                let xv = self.val(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&g, &v)| g * v.cos()).collect(),
                );
            }
            Op::Cos(x) => {
                let xv = self.val(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&g, &v)| -g * v.sin()).collect(),
                );
            }
            Op::Exp(x) => {
                let y = out.data();
                self.accumulate(grads, *x, g.iter().zip(y).map(|(&g, &y)| g * y).collect());
            }
            Op::Log(x) => {
                let xv = self.val(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(&g, &v)| g / v).collect());
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let xv = self.val(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let xv = self.val(*x).data();
                let two = T::of(2.0);
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&g, &v)| two * g * v).collect(),
                );
            }
            Op::SnakeBeta {
                x,
                log_alpha,
                log_beta,
                axis,
            } => {
                let tx = self.val(*x);
                let (outer, c, inner) = around(tx.shape(), *axis);
                let xd = tx.data();
                let la = self.val(*log_alpha).data();
                let lb = self.val(*log_beta).data();
                let eps = T::of(SNAKE_EPS);
                let mut gx = vec![T::zero(); xd.len()];
                let mut ga = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let alpha = la[ch].exp();
                        let beta = lb[ch].exp();
                        let inv = T::one() / (beta + eps);
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            let ax = alpha * xd[i];
                            let (s, co) = ax.sin_cos();
                            let s2 = s * s;
                            let sin2 = T::of(2.0) * s * co;
                            gx[i] = g[i] * (T::one() + inv * alpha * sin2);
                            ga[ch] = ga[ch] + g[i] * inv * sin2 * ax;
                            gb[ch] = gb[ch] - g[i] * s2 * beta * inv * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                let la_shape = self.val(*log_alpha).len();
                debug_assert_eq!(la_shape, c);
                self.accumulate(grads, *log_alpha, ga);
                self.accumulate(grads, *log_beta, gb);
            }
            Op::Rope { x, cos, sin } => {
                let s = out.shape();
                let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
                let half = d / 2;
                let mut gx = vec![T::zero(); g.len()];
                for (r, (dst, grow)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                    let m = r % l;
                    for i in 0..half {
                        let (c, sn) = (cos[m * half + i], sin[m * half + i]);
                        let (ga, gb) = (grow[2 * i], grow[2 * i + 1]);
                        dst[2 * i] = ga * c + gb * sn;
                        dst[2 * i + 1] = gb * c - ga * sn;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

/// Added to β in the snake denominator.
pub const SNAKE_EPS: f64 = 1e-9;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.constant(Tensor::eye(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let s = g.constant(t(&[1, 5], &[1., -2., 3., 0.5, 7.]));
        let k = g.constant(t(&[1, 1, 1], &[1.]));
        let y = g.conv1d(s, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(s).data());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum(xx);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[3., -1., 0., 8.]), true);
        let loss = g.mean(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros([4]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        let y = g.leaf(t(&[3], &[1., 2., 3.]), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.; 3]);
    }

    #[test]
    fn broadcast_bias_gradient_sums_over_time() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3]));
        let b = g.leaf(t(&[2, 1], &[1., 2.]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 1., 1., 2., 2., 2.]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3., 3.]);
    }

    #[test]
    fn strided_conv_output_length() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3, 8]));
        let w = g.constant(Tensor::zeros([5, 3, 3]));
        let y = g.conv1d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[5, 4]);
    }
}
