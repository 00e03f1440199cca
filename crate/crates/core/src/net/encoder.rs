use super::attention::MultiHeadAttention;
use super::layers::{Conv, LayerNorm};
use super::{Bound, Builder, Model, ModelConfig, ParamId};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn1: Conv,
    ffn2: Conv,
    norm2: LayerNorm,
}

/// Token embedding, conv prenet, RoPE Transformer stack, mean projection,
/// and a duration predictor fed with the detached encoder output.
#[derive(Clone, Debug)]
pub struct Encoder {
    channels: usize,
    emb: ParamId,
    prenet: Vec<(Conv, LayerNorm)>,
    prenet_proj: Conv,
    layers: Vec<EncoderLayer>,
    proj_mu: Conv,
    dp: [(Conv, LayerNorm); 2],
    dp_proj: Conv,
}

pub struct EncoderOutput {
    /// `[n_mel × N]` per-token means.
    pub mu: Var,
    /// `[N]` log-duration predictions.
    pub log_durations: Var,
}

impl Encoder {
    pub(crate) fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let e = &cfg.encoder;
        let c = e.channels;
        let emb = b.uniform(
            "encoder.emb".into(),
            &[cfg.n_vocab, c],
            (3.0 / c as f64).sqrt(),
        );
        let prenet = (0..e.prenet_layers)
            .map(|i| {
                (
                    Conv::build(
                        b,
                        &format!("encoder.prenet{i}.conv"),
                        c,
                        c,
                        e.prenet_kernel,
                        1,
                    ),
                    LayerNorm::build(b, &format!("encoder.prenet{i}.norm"), c),
                )
            })
            .collect();
        let prenet_proj = Conv::zero_init(b, "encoder.prenet.proj", c, c);
        let layers = (0..e.layers)
            .map(|i| {
                let n = format!("encoder.layer{i}");
                EncoderLayer {
                    attn: MultiHeadAttention::build(
                        b,
                        &format!("{n}.attn"),
                        c,
                        e.heads,
                        c / e.heads,
                        true,
                    ),
                    norm1: LayerNorm::build(b, &format!("{n}.norm1"), c),
                    ffn1: Conv::build(b, &format!("{n}.ffn1"), c, e.ffn_channels, e.ffn_kernel, 1),
                    ffn2: Conv::build(b, &format!("{n}.ffn2"), e.ffn_channels, c, e.ffn_kernel, 1),
                    norm2: LayerNorm::build(b, &format!("{n}.norm2"), c),
                }
            })
            .collect();
        let proj_mu = Conv::build(b, "encoder.proj_mu", c, cfg.n_mel, 1, 1);
        let dc = e.dp_channels;
        let dp = [
            (
                Conv::build(b, "duration.conv1", c, dc, e.dp_kernel, 1),
                LayerNorm::build(b, "duration.norm1", dc),
            ),
            (
                Conv::build(b, "duration.conv2", dc, dc, e.dp_kernel, 1),
                LayerNorm::build(b, "duration.norm2", dc),
            ),
        ];
        let dp_proj = Conv::build(b, "duration.proj", dc, 1, 1, 1);
        Self {
            channels: c,
            emb,
            prenet,
            prenet_proj,
            layers,
            proj_mu,
            dp,
            dp_proj,
        }
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: &[usize],
    ) -> Result<EncoderOutput> {
        let n = tokens.len();
        let x = g.gather(p.var(self.emb), 0, tokens)?;
        let x = g.scale(x, T::of((self.channels as f64).sqrt()));
        let mut x = g.transpose(x)?; // [C × N]

        if !self.prenet.is_empty() {
            let residual = x;
            let mut h = x;
            for (conv, norm) in &self.prenet {
                h = conv.forward(g, p, h)?;
                h = norm.forward_channels(g, p, h)?;
                h = g.relu(h);
            }
            let h = self.prenet_proj.forward(g, p, h)?;
            x = g.add(residual, h)?;
        }

        let mut rows = g.transpose(x)?; // [N × C]
        for layer in &self.layers {
            let a = layer.attn.forward(g, p, rows)?;
            let s = g.add(rows, a)?;
            rows = layer.norm1.forward(g, p, s)?;
            let cols = g.transpose(rows)?;
            let f = layer.ffn1.forward(g, p, cols)?;
            let f = g.relu(f);
            let f = layer.ffn2.forward(g, p, f)?;
            let f = g.transpose(f)?;
            let s = g.add(rows, f)?;
            rows = layer.norm2.forward(g, p, s)?;
        }
        let hidden = g.transpose(rows)?;
        let mu = self.proj_mu.forward(g, p, hidden)?;

        let mut d = g.detach(hidden);
        for (conv, norm) in &self.dp {
            d = conv.forward(g, p, d)?;
            d = g.relu(d);
            d = norm.forward_channels(g, p, d)?;
        }
        let d = self.dp_proj.forward(g, p, d)?;
        let log_durations = g.reshape(d, &[n])?;
        Ok(EncoderOutput { mu, log_durations })
    }
}

/// Runs the encoder on one unpadded token sequence.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    p: &Bound,
    tokens: &[usize],
) -> Result<EncoderOutput> {
    if tokens.is_empty() {
        return Err(Error::invalid("encoder_forward", "empty token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= model.config.n_vocab) {
        return Err(Error::invalid(
            "encoder_forward",
            format!(
                "token id {bad} out of vocabulary of size {}",
                model.config.n_vocab
            ),
        ));
    }
    model.encoder.forward(g, p, tokens)
}

/// Batched inference over padded token rows. Returns `mu: [B × n_mel × N]` and
/// `log_durations: [B × N]`; positions outside each row's valid length are zero.
pub fn encoder_forward_batch<T: Real>(
    model: &Model<T>,
    tokens: &[Vec<usize>],
    lengths: &[usize],
    exec: Exec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if tokens.len() != lengths.len() {
        return Err(Error::shape(
            "encoder_forward_batch",
            &[tokens.len()],
            &[lengths.len()],
        ));
    }
    let b = tokens.len();
    let n_max = tokens.iter().map(Vec::len).max().unwrap_or(0);
    let m = model.config.n_mel;
    let items = exec.map_range(b, |i| -> Result<Option<(Tensor<T>, Tensor<T>)>> {
        let len = lengths[i];
        if len > tokens[i].len() {
            return Err(Error::invalid(
                "encoder_forward_batch",
                format!("length {len} exceeds row {i}"),
            ));
        }
        if len == 0 {
            return Ok(None);
        }
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let out = encoder_forward(&mut g, model, &p, &tokens[i][..len])?;
        Ok(Some((
            g.value(out.mu).clone(),
            g.value(out.log_durations).clone(),
        )))
    });
    let mut mu = Tensor::zeros([b, m, n_max]);
    let mut logw = Tensor::zeros([b, n_max]);
    for (i, item) in items.into_iter().enumerate() {
        if let Some((mu_i, lw)) = item? {
            let len = lw.len();
            for c in 0..m {
                let dst = (i * m + c) * n_max;
                mu.data_mut()[dst..dst + len].copy_from_slice(&mu_i.data()[c * len..(c + 1) * len]);
            }
            logw.data_mut()[i * n_max..i * n_max + len].copy_from_slice(lw.data());
        }
    }
    Ok((mu, logw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Preset;

    fn toy() -> Model<f32> {
        Model::new(ModelConfig::preset(Preset::Toy, 36), 4).unwrap()
    }

    #[test]
    fn output_shapes() {
        let model = toy();
        for n in [1, 5, 12] {
            let tokens: Vec<usize> = (0..n).map(|i| 1 + i % 30).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, false);
            let out = encoder_forward(&mut g, &model, &p, &tokens).unwrap();
            assert_eq!(g.shape(out.mu), &[20, n]);
            assert_eq!(g.shape(out.log_durations), &[n]);
        }
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let model = toy();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        assert!(encoder_forward(&mut g, &model, &p, &[1, 36]).is_err());
        assert!(encoder_forward(&mut g, &model, &p, &[]).is_err());
    }

    #[test]
    fn batch_order_and_padding() {
        let model = toy();
        let rows = vec![vec![3, 4, 5, 0], vec![7, 8, 0, 0], vec![0, 0, 0, 0]];
        let lens = [3, 2, 0];
        let (mu, lw) = encoder_forward_batch(&model, &rows, &lens, Exec::Sequential).unwrap();
        let rev: Vec<_> = rows.iter().rev().cloned().collect();
        let (mu_r, lw_r) =
            encoder_forward_batch(&model, &rev, &[0, 2, 3], Exec::default()).unwrap();
        let (m, n) = (20, 4);
        for b in 0..3 {
            let r = 2 - b;
            assert_eq!(
                &mu.data()[b * m * n..(b + 1) * m * n],
                &mu_r.data()[r * m * n..(r + 1) * m * n]
            );
            assert_eq!(
                &lw.data()[b * n..(b + 1) * n],
                &lw_r.data()[r * n..(r + 1) * n]
            );
        }
        assert!(mu.data()[2 * m * n..].iter().all(|&v| v == 0.0));
        assert!(lw.data()[2 * n..].iter().all(|&v| v == 0.0));
        assert!((0..m).all(|c| mu.data()[c * n + 3] == 0.0));
    }

    #[test]
    fn forward_is_reproducible() {
        let a = toy();
        let b = toy();
        let run = |m: &Model<f32>| {
            let mut g = Graph::new();
            let p = m.params.bind(&mut g, false);
            let out = encoder_forward(&mut g, m, &p, &[2, 9, 14]).unwrap();
            (g.value(out.mu).clone(), g.value(out.log_durations).clone())
        };
        assert_eq!(run(&a), run(&b));
    }
}
