use super::attention::MultiHeadAttention;
use super::layers::{Conv, GroupNorm, LayerNorm, Linear, Snake};
use super::{Bound, Builder, Model, ModelConfig};
use crate::cfm::FlowTime;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// `[sin(s·f_0) … sin(s·f_{h−1}), cos(s·f_0) … cos(s·f_{h−1})]` with `s = 1000·t`,
/// `h = dim/2` and `f_i = exp(−i·ln(10000)/(h − 1))`.
pub fn sinusoidal_embedding<T: Real>(t: FlowTime, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) || dim < 4 {
        return Err(Error::invalid(
            "time_embed",
            format!("dim must be even and >= 4, got {dim}"),
        ));
    }
    let half = dim / 2;
    let s = 1000.0 * t.get();
    let step = 10000f64.ln() / (half - 1) as f64;
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|i| T::of((s * (-(i as f64) * step).exp()).sin())));
    out.extend((0..half).map(|i| T::of((s * (-(i as f64) * step).exp()).cos())));
    Tensor::new([dim], out)
}

#[derive(Clone, Debug)]
struct TimeMlp {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    conv1: Conv,
    norm1: GroupNorm,
    act1: Snake,
    time_proj: Linear,
    conv2: Conv,
    norm2: GroupNorm,
    act2: Snake,
    skip: Option<Conv>,
}

impl ResBlock {
    pub(crate) fn build<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let d = &cfg.decoder;
        Self {
            conv1: Conv::build(b, &format!("{name}.conv1"), c_in, c_out, 3, 1),
            norm1: GroupNorm::build(b, &format!("{name}.norm1"), c_out, d.groups),
            act1: Snake::build(b, &format!("{name}.act1"), c_out),
            time_proj: Linear::build(b, &format!("{name}.time_proj"), d.time_dim, c_out),
            conv2: Conv::build(b, &format!("{name}.conv2"), c_out, c_out, 3, 1),
            norm2: GroupNorm::build(b, &format!("{name}.norm2"), c_out, d.groups),
            act2: Snake::build(b, &format!("{name}.act2"), c_out),
            skip: (c_in != c_out)
                .then(|| Conv::build(b, &format!("{name}.skip"), c_in, c_out, 1, 1)),
        }
    }

    /// `x: [C_in × T]`, `temb: [1 × time_dim]` after the shared nonlinearity.
    pub(crate) fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = self.norm1.forward(g, p, h)?;
        let h = self.act1.forward(g, p, h, 0)?;
        let tp = self.time_proj.forward(g, p, temb)?;
        let tp = g.transpose(tp)?;
        let h = g.add(h, tp)?;
        let h = self.conv2.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = self.act2.forward(g, p, h, 0)?;
        let r = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(h, r)
    }
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff1: Linear,
    act: Snake,
    ff2: Linear,
}

impl TransformerBlock {
    fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &ModelConfig) -> Self {
        let d = &cfg.decoder;
        let c = d.hidden;
        let inner = c * d.ffn_mult;
        Self {
            norm1: LayerNorm::build(b, &format!("{name}.norm1"), c),
            attn: MultiHeadAttention::build(
                b,
                &format!("{name}.attn"),
                c,
                d.heads,
                d.attention_dim,
                false,
            ),
            norm2: LayerNorm::build(b, &format!("{name}.norm2"), c),
            ff1: Linear::build(b, &format!("{name}.ff1"), c, inner),
            act: Snake::build(b, &format!("{name}.act"), inner),
            ff2: Linear::build(b, &format!("{name}.ff2"), inner, c),
        }
    }

    /// `x: [C × T]`; attention runs over time steps.
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let rows = g.transpose(x)?;
        let h = self.norm1.forward(g, p, rows)?;
        let h = self.attn.forward(g, p, h)?;
        let rows = g.add(rows, h)?;
        let h = self.norm2.forward(g, p, rows)?;
        let h = self.ff1.forward(g, p, h)?;
        let h = self.act.forward(g, p, h, 1)?;
        let h = self.ff2.forward(g, p, h)?;
        let rows = g.add(rows, h)?;
        g.transpose(rows)
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    res: ResBlock,
    attn: TransformerBlock,
    down: Conv,
}

#[derive(Clone, Debug)]
struct MidBlock {
    res: ResBlock,
    attn: TransformerBlock,
}

#[derive(Clone, Debug)]
struct UpBlock {
    up: Conv,
    res: ResBlock,
    attn: TransformerBlock,
}

/// 1-D U-Net over `concat(x_t, μ)` with a Transformer block after every
/// residual block.
#[derive(Clone, Debug)]
pub struct Decoder {
    n_mel: usize,
    time: TimeMlp,
    down: Vec<DownBlock>,
    mid: Vec<MidBlock>,
    up: Vec<UpBlock>,
    final_conv: Conv,
    final_norm: GroupNorm,
    final_act: Snake,
    proj: Conv,
}

impl Decoder {
    pub(crate) fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let d = &cfg.decoder;
        let h = d.hidden;
        let time = TimeMlp {
            dim: h,
            fc1: Linear::build(b, "decoder.time.fc1", h, d.time_dim),
            fc2: Linear::build(b, "decoder.time.fc2", d.time_dim, d.time_dim),
        };
        let down = (0..d.n_down)
            .map(|i| {
                let n = format!("decoder.down{i}");
                let c_in = if i == 0 { 2 * cfg.n_mel } else { h };
                DownBlock {
                    res: ResBlock::build(b, &format!("{n}.res"), c_in, h, cfg),
                    attn: TransformerBlock::build(b, &format!("{n}.transformer"), cfg),
                    down: Conv::build(b, &format!("{n}.downsample"), h, h, 3, 2),
                }
            })
            .collect();
        let mid = (0..d.n_mid)
            .map(|i| {
                let n = format!("decoder.mid{i}");
                MidBlock {
                    res: ResBlock::build(b, &format!("{n}.res"), h, h, cfg),
                    attn: TransformerBlock::build(b, &format!("{n}.transformer"), cfg),
                }
            })
            .collect();
        let up = (0..d.n_up)
            .map(|i| {
                let n = format!("decoder.up{i}");
                UpBlock {
                    up: Conv::build(b, &format!("{n}.upsample"), h, h, 3, 1),
                    res: ResBlock::build(b, &format!("{n}.res"), 2 * h, h, cfg),
                    attn: TransformerBlock::build(b, &format!("{n}.transformer"), cfg),
                }
            })
            .collect();
        Self {
            n_mel: cfg.n_mel,
            time,
            down,
            mid,
            up,
            final_conv: Conv::build(b, "decoder.final.conv", h, h, 3, 1),
            final_norm: GroupNorm::build(b, "decoder.final.norm", h, d.groups),
            final_act: Snake::build(b, "decoder.final.act", h),
            proj: Conv::build(b, "decoder.final.proj", h, cfg.n_mel, 1, 1),
        }
    }

    fn time_embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, t: FlowTime) -> Result<Var> {
        let s = sinusoidal_embedding::<T>(t, self.time.dim)?.reshape([1, self.time.dim])?;
        let s = g.constant(s);
        let h = self.time.fc1.forward(g, p, s)?;
        let h = g.silu(h);
        self.time.fc2.forward(g, p, h)
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_t: Var,
        mu: Var,
        t: FlowTime,
    ) -> Result<Var> {
        let xs = g.shape(x_t).to_vec();
        if xs.len() != 2 || xs[0] != self.n_mel || g.shape(mu) != xs.as_slice() {
            return Err(Error::shape("decoder_forward", &xs, g.shape(mu)));
        }
        let len = xs[1];
        if len == 0 {
            return Err(Error::invalid("decoder_forward", "zero-length input"));
        }
        let temb = self.time_embed(g, p, t)?;
        let temb = g.silu(temb);

        let factor = 1usize << self.down.len();
        let padded = len.div_ceil(factor) * factor;
        let mut x = g.concat(&[x_t, mu], 0)?;
        if padded > len {
            let z = g.constant(Tensor::zeros([2 * self.n_mel, padded - len]));
            x = g.concat(&[x, z], 1)?;
        }

        let mut skips = Vec::with_capacity(self.down.len());
        for blk in &self.down {
            x = blk.res.forward(g, p, x, temb)?;
            x = blk.attn.forward(g, p, x)?;
            skips.push(x);
            x = blk.down.forward(g, p, x)?;
        }
        for blk in &self.mid {
            x = blk.res.forward(g, p, x, temb)?;
            x = blk.attn.forward(g, p, x)?;
        }
        for blk in &self.up {
            let skip = skips.pop().expect("matching skip");
            let l = g.shape(x)[1];
            let index: Vec<usize> = (0..2 * l).map(|j| j / 2).collect();
            x = g.gather(x, 1, &index)?;
            x = blk.up.forward(g, p, x)?;
            x = g.concat(&[x, skip], 0)?;
            x = blk.res.forward(g, p, x, temb)?;
            x = blk.attn.forward(g, p, x)?;
        }
        let x = self.final_conv.forward(g, p, x)?;
        let x = self.final_norm.forward(g, p, x)?;
        let x = self.final_act.forward(g, p, x, 0)?;
        let x = self.proj.forward(g, p, x)?;
        if padded > len {
            g.slice(x, 1, 0, len)
        } else {
            Ok(x)
        }
    }
}

/// Learned time embedding `[1 × time_dim]` of `t`.
pub fn time_embed<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    p: &Bound,
    t: FlowTime,
) -> Result<Var> {
    model.decoder.time_embed(g, p, t)
}

/// Predicted vector field `v_t(x_t | μ)` with the shape of `x_t: [n_mel × T]`.
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    p: &Bound,
    x_t: Var,
    mu: Var,
    t: FlowTime,
) -> Result<Var> {
    model.decoder.forward(g, p, x_t, mu, t)
}
