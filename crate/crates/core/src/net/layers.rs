use super::{Bound, Builder, ParamId};
use crate::error::Result;
use crate::numerics::{Graph, Real, Var};

/// `y = x·W + b` on row vectors, `x: [L × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub(crate) fn build<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self {
            w: b.weight(format!("{name}.w"), &[d_in, d_out], d_in),
            b: b.zeros(format!("{name}.b"), &[d_out]),
        }
    }

    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add(y, p.var(self.b))
    }
}

/// 1-D convolution on `[C_in × T]`.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub(crate) fn build<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            w: b.weight(format!("{name}.w"), &[c_out, c_in, kernel], c_in * kernel),
            b: b.zeros(format!("{name}.b"), &[c_out]),
            stride,
            pad: kernel / 2,
        }
    }

    pub(crate) fn zero_init<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self {
            w: b.zeros(format!("{name}.w"), &[c_out, c_in, 1]),
            b: b.zeros(format!("{name}.b"), &[c_out]),
            stride: 1,
            pad: 0,
        }
    }

    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// Layer norm over the last axis with a learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: b.ones(format!("{name}.gamma"), &[channels]),
            beta: b.zeros(format!("{name}.beta"), &[channels]),
        }
    }

    /// `x: [L × C]`.
    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5)?;
        let n = g.mul(n, p.var(self.gamma))?;
        g.add(n, p.var(self.beta))
    }

    /// `x: [C × T]`, normalised over channels at each time step.
    pub(crate) fn forward_channels<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
    ) -> Result<Var> {
        let xt = g.transpose(x)?;
        let y = self.forward(g, p, xt)?;
        g.transpose(y)
    }
}

/// Group norm over `[C × T]`.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    gamma: ParamId,
    beta: ParamId,
}

impl GroupNorm {
    pub(crate) fn build<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        Self {
            groups,
            gamma: b.ones(format!("{name}.gamma"), &[channels, 1]),
            beta: b.zeros(format!("{name}.beta"), &[channels, 1]),
        }
    }

    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (c, t) = (s[0], s[1]);
        let r = g.reshape(x, &[self.groups, c / self.groups * t])?;
        let n = g.layer_norm(r, 1e-5)?;
        let n = g.reshape(n, &[c, t])?;
        let n = g.mul(n, p.var(self.gamma))?;
        g.add(n, p.var(self.beta))
    }
}

/// Snake-beta activation with per-channel log-scale `α` and `β`.
#[derive(Clone, Debug)]
pub struct Snake {
    log_alpha: ParamId,
    log_beta: ParamId,
}

impl Snake {
    pub(crate) fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        Self {
            log_alpha: b.zeros(format!("{name}.log_alpha"), &[channels]),
            log_beta: b.zeros(format!("{name}.log_beta"), &[channels]),
        }
    }

    pub(crate) fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        axis: usize,
    ) -> Result<Var> {
        g.snake_beta(x, p.var(self.log_alpha), p.var(self.log_beta), axis)
    }
}

/// `y = x + sin²(αx)/(β + 1e-9)`, `α = exp(log_alpha)`, `β = exp(log_beta)`, with the
/// channel index on `axis`.
pub fn snake_beta<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    log_alpha: Var,
    log_beta: Var,
    axis: usize,
) -> Result<Var> {
    g.snake_beta(x, log_alpha, log_beta, axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor, SNAKE_EPS};
    use std::f64::consts::PI;

    fn scalar_snake(x: f64, alpha: f64, beta: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::from_f64([1, 1], &[x]).unwrap());
        let la = g.constant(Tensor::from_f64([1], &[alpha.ln()]).unwrap());
        let lb = g.constant(Tensor::from_f64([1], &[beta.ln()]).unwrap());
        let y = snake_beta(&mut g, xv, la, lb, 0).unwrap();
        g.value(y).item()
    }

    #[test]
    fn snake_at_zero() {
        for (a, b) in [(1.0, 1.0), (0.3, 2.5), (4.0, 0.1)] {
            assert_eq!(scalar_snake(0.0, a, b), 0.0);
        }
    }

    #[test]
    fn snake_at_half_pi() {
        // π/2 + 1/(1 + 1e-9)
        let y = scalar_snake(PI / 2.0, 1.0, 1.0);
        assert!((y - (PI / 2.0 + 1.0 / (1.0 + SNAKE_EPS))).abs() < 1e-15);
        assert!((y - 2.5708).abs() < 1e-4);
    }

    #[test]
    fn snake_periodic_term() {
        for (x, a, b) in [(0.3, 1.0, 1.0), (-1.7, 2.0, 0.5), (2.2, 0.7, 3.0)] {
            let shifted = x + PI / a;
            let lhs = scalar_snake(shifted, a, b) - shifted;
            let rhs = scalar_snake(x, a, b) - x;
            assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn snake_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3, 4]));
        let la = g.constant(Tensor::zeros([2]));
        assert!(snake_beta(&mut g, x, la, la, 0).is_err());
    }

    #[test]
    fn snake_gradient_matches_finite_differences() {
        let x = Tensor::from_f64([2, 3], &[0.4, -1.3, 1.9, -0.2, 0.8, -1.7]).unwrap();
        let la = Tensor::from_f64([2], &[0.3, -0.4]).unwrap();
        let lb = Tensor::from_f64([2], &[-0.2, 0.5]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = snake_beta(g, v[0], v[1], v[2], 0)?;
                Ok(g.sum(y))
            },
            &[x, la, lb],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
