use super::layers::Linear;
use super::{Bound, Builder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Rotates `x: [heads × L × d_head]` (or any `[.., L, d]`) by position.
pub fn rope_rotate<T: Real>(x: &Tensor<T>, positions: &[f64]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.rope(v, positions)?;
    Ok(g.value(y).clone())
}

/// Scaled dot-product logits `q·kᵀ/√d` after rotating `q: [Lq × d]` and
/// `k: [Lk × d]` to their positions.
pub fn attention_logits<T: Real>(
    q: &Tensor<T>,
    q_pos: &[f64],
    k: &Tensor<T>,
    k_pos: &[f64],
) -> Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1) {
        return Err(Error::shape("attention_logits", q.shape(), k.shape()));
    }
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let kv = g.constant(k.clone());
    let qr = g.rope(qv, q_pos)?;
    let kr = g.rope(kv, k_pos)?;
    let kt = g.transpose(kr)?;
    let l = g.matmul(qr, kt)?;
    let l = g.scale(l, T::of(1.0 / (q.dim(1) as f64).sqrt()));
    Ok(g.value(l).clone())
}

/// Self-attention over row vectors `x: [L × C]`, optionally with rotary
/// position embeddings on queries and keys.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
    rope: bool,
}

impl MultiHeadAttention {
    pub(crate) fn build<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        heads: usize,
        head_dim: usize,
        rope: bool,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            q: Linear::build(b, &format!("{name}.q"), channels, inner),
            k: Linear::build(b, &format!("{name}.k"), channels, inner),
            v: Linear::build(b, &format!("{name}.v"), channels, inner),
            o: Linear::build(b, &format!("{name}.o"), inner, channels),
            heads,
            head_dim,
            rope,
        }
    }

    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let l = g.shape(x)[0];
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let positions: Vec<f64> = (0..l).map(|m| m as f64).collect();
        let scale = T::of(1.0 / (self.head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let mut qh = g.slice(q, 1, off, self.head_dim)?;
            let mut kh = g.slice(k, 1, off, self.head_dim)?;
            let vh = g.slice(v, 1, off, self.head_dim)?;
            if self.rope {
                qh = g.rope(qh, &positions)?;
                kh = g.rope(kh, &positions)?;
            }
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax(logits)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        self.o.forward(g, p, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, stream, Purpose};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn position_zero_is_identity() {
        let x = Tensor::<f64>::from_f64([1, 1, 4], &[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(rope_rotate(&x, &[0.0]).unwrap(), x);
    }

    #[test]
    fn quarter_turn_in_two_dimensions() {
        let x = Tensor::<f64>::from_f64([1, 1, 2], &[1.0, 0.0]).unwrap();
        let y = rope_rotate(&x, &[FRAC_PI_2]).unwrap();
        assert!((y.data()[0] - FRAC_PI_2.cos()).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn odd_head_dimension_is_rejected() {
        let x = Tensor::<f64>::zeros([1, 2, 3]);
        assert!(rope_rotate(&x, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn dot_products_depend_on_offsets_only() {
        let mut rng = stream(3, Purpose::Test, 0);
        for case in 0..20 {
            let q = Tensor::<f64>::new([1, 8], normals(&mut rng, 8)).unwrap();
            let k = Tensor::<f64>::new([1, 8], normals(&mut rng, 8)).unwrap();
            let (m, n, s) = (case as f64, (3 * case % 7) as f64, 11.0 + case as f64);
            let a = attention_logits(&q, &[m], &k, &[n]).unwrap().item();
            let b = attention_logits(&q, &[m + s], &k, &[n + s]).unwrap().item();
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
