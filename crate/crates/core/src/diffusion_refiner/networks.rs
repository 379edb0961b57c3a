//! Networks of the refiner: the slim prior encoder, the noise predictor of the
//! prior chain, and the U-shaped restorer built from dynamic transformer blocks.

use candle_core::{Module, Tensor, D};
use candle_nn::{conv2d, conv2d_no_bias, linear, Conv2d, Conv2dConfig, Init, Linear, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, DepthwiseConv3x3, LayerNorm};

const LEAK: f64 = 0.1;

fn conv3x3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(conv2d(cin, cout, 3, cfg, vb)?)
}

/// Starts at zero so a fresh restorer passes the decoded image through.
fn zero_conv3x3(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv2d> {
    let w = vb.get_with_hints((cout, cin, 3, 3), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    let cfg = Conv2dConfig {
        padding: 1,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

fn conv1x1(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(conv2d(cin, cout, 1, Conv2dConfig::default(), vb)?)
}

/// Strided 3×3 convolution pyramid followed by a global average and an MLP
/// head producing a `4·C′` vector per image.
#[derive(Debug, Clone)]
pub struct PriorEncoder {
    convs: Vec<Conv2d>,
    head1: Linear,
    head2: Linear,
}

impl PriorEncoder {
    pub fn new(in_channels: usize, channels: usize, downsamples: usize, vb: VarBuilder) -> Result<Self> {
        let convs = (0..downsamples.max(1))
            .map(|i| conv3x3(if i == 0 { in_channels } else { channels }, channels, 2, vb.pp(format!("down{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            head1: linear(channels, 4 * channels, vb.pp("head1"))?,
            head2: linear(4 * channels, 4 * channels, vb.pp("head2"))?,
        })
    }

    /// `(batch, in_channels, H, W)` → `(batch, 4·C′)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.convs {
            x = candle_nn::ops::leaky_relu(&conv.forward(&x)?, LEAK)?;
        }
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let h = candle_nn::ops::leaky_relu(&self.head1.forward(&pooled)?, LEAK)?;
        Ok(self.head2.forward(&h)?)
    }
}

/// Sinusoidal embedding of an integer time step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out.resize(dim, 0.0);
    out
}

/// Anything that can predict the noise of a diffused prior vector.
pub trait NoisePredictor {
    /// `z_t`, `condition`: `(batch, 4·C′)`.
    fn predict(&self, z_t: &Tensor, t: usize, condition: &Tensor) -> Result<Tensor>;
}

/// Four-layer MLP over `z_t ⊕ condition ⊕ time embedding`, added to the
/// skip term `z_t / √(1 − ᾱ_t)`. The skip alone is the noise that explains all
/// of `z_t`, i.e. it implies `ẑ₀ = 0`; the last layer starts at zero so an
/// untrained chain ends near zero instead of amplifying its input.
#[derive(Debug, Clone)]
pub struct EpsMlp {
    layers: Vec<Linear>,
    time_dim: usize,
    skip: Vec<f64>,
}

impl EpsMlp {
    /// `alpha_bar` is the schedule's `ᾱ_1 … ᾱ_T`.
    pub fn new(prior_dim: usize, time_dim: usize, alpha_bar: &[f64], vb: VarBuilder) -> Result<Self> {
        let hidden = prior_dim;
        let dims = [2 * prior_dim + time_dim, hidden, hidden, hidden, prior_dim];
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let vb = vb.pp(format!("fc{i}"));
                if i == last {
                    let weight = vb.get_with_hints((w[1], w[0]), "weight", Init::Const(0.0))?;
                    let bias = vb.get_with_hints(w[1], "bias", Init::Const(0.0))?;
                    Ok(Linear::new(weight, Some(bias)))
                } else {
                    linear(w[0], w[1], vb)
                }
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let skip = alpha_bar.iter().map(|ab| 1.0 / (1.0 - ab).sqrt()).collect();
        Ok(Self { layers, time_dim, skip })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

impl NoisePredictor for EpsMlp {
    fn predict(&self, z_t: &Tensor, t: usize, condition: &Tensor) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        let temb = Tensor::from_vec(time_embedding(t, self.time_dim), (1, self.time_dim), z_t.device())?
            .to_dtype(z_t.dtype())?
            .broadcast_as((b, self.time_dim))?;
        let skip = *self
            .skip
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("time step {t} outside 1..={}", self.skip.len())))?;
        let mut x = Tensor::cat(&[z_t, condition, &temb], 1)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i < last {
                x = candle_nn::ops::leaky_relu(&x, LEAK)?;
            }
        }
        Ok(((z_t * skip)? + x)?)
    }
}

/// Per-channel scale and shift computed from the prior vector:
/// `x · (1 + s) + b`.
#[derive(Debug, Clone)]
struct Modulation {
    proj: Linear,
}

impl Modulation {
    fn new(prior_dim: usize, channels: usize, vb: VarBuilder) -> Result<Self> {
        let w = vb.get_with_hints((2 * channels, prior_dim), "weight", Init::Randn { mean: 0.0, stdev: 0.02 })?;
        Ok(Self {
            proj: Linear::new(w, None),
        })
    }

    fn apply(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let p = self.proj.forward(z)?;
        let scale = p.narrow(1, 0, c)?.unsqueeze(2)?.unsqueeze(3)?;
        let shift = p.narrow(1, c, c)?.unsqueeze(2)?.unsqueeze(3)?;
        Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?)
    }
}

/// Dynamic multi-head transposed attention: attention across channels, so the
/// attention matrix is `(C/heads × C/heads)` per head whatever the image size.
#[derive(Debug, Clone)]
pub struct Dmta {
    modulation: Modulation,
    qkv: Conv2d,
    qkv_dw: DepthwiseConv3x3,
    temperature: Tensor,
    project_out: Conv2d,
    heads: usize,
}

impl Dmta {
    pub fn new(channels: usize, heads: usize, prior_dim: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            modulation: Modulation::new(prior_dim, channels, vb.pp("modulation"))?,
            qkv: conv1x1(channels, 3 * channels, vb.pp("qkv"))?,
            qkv_dw: DepthwiseConv3x3::new(3 * channels, vb.pp("qkv_dw"))?,
            temperature: vb.get_with_hints((heads, 1, 1), "temperature", Init::Const(1.0))?,
            project_out: conv1x1(channels, channels, vb.pp("project_out"))?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Returns the output and the attention `(batch, heads, C/heads, C/heads)`.
    pub fn forward_with_attention(&self, x: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let ch = c / self.heads;
        let x = self.modulation.apply(x, z)?;
        let qkv = self.qkv_dw.forward(&self.qkv.forward(&x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(1, i * c, c)?.reshape((b, self.heads, ch, h * w))?)
        };
        let l2 = |t: Tensor| -> Result<Tensor> {
            let norm = (t.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
            Ok(t.broadcast_div(&norm)?)
        };
        let q = l2(split(0)?)?;
        let k = l2(split(1)?)?;
        let v = split(2)?;
        let logits = q.matmul(&k.t()?)?.broadcast_mul(&self.temperature.unsqueeze(0)?)?;
        let attn = softmax_last(&logits)?;
        let out = attn.matmul(&v)?.reshape((b, c, h, w))?;
        Ok((self.project_out.forward(&out)?, attn))
    }

    pub fn forward(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(x, z)?.0)
    }
}

/// Dynamic gated feed-forward network: modulation, 1×1 expansion, depthwise
/// 3×3, GELU gate, 1×1 projection.
#[derive(Debug, Clone)]
pub struct Dgfn {
    modulation: Modulation,
    project_in: Conv2d,
    dw: DepthwiseConv3x3,
    project_out: Conv2d,
    hidden: usize,
}

impl Dgfn {
    pub fn new(channels: usize, expansion: usize, prior_dim: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Self {
            modulation: Modulation::new(prior_dim, channels, vb.pp("modulation"))?,
            project_in: conv1x1(channels, 2 * hidden, vb.pp("project_in"))?,
            dw: DepthwiseConv3x3::new(2 * hidden, vb.pp("dw"))?,
            project_out: conv1x1(hidden, channels, vb.pp("project_out"))?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let x = self.modulation.apply(x, z)?;
        let x = self.dw.forward(&self.project_in.forward(&x)?)?;
        let gate = x.narrow(1, 0, self.hidden)?.gelu_erf()?;
        let value = x.narrow(1, self.hidden, self.hidden)?;
        Ok(self.project_out.forward(&(gate * value)?)?)
    }
}

/// Pre-norm residual block: `x + DMTA(LN(x), z)`, then `x + DGFN(LN(x), z)`.
#[derive(Debug, Clone)]
pub struct DynamicTransformerBlock {
    norm1: LayerNorm,
    attn: Dmta,
    norm2: LayerNorm,
    ffn: Dgfn,
}

impl DynamicTransformerBlock {
    pub fn new(channels: usize, heads: usize, expansion: usize, prior_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(channels, vb.pp("norm1"))?,
            attn: Dmta::new(channels, heads, prior_dim, vb.pp("attn"))?,
            norm2: LayerNorm::new(channels, vb.pp("norm2"))?,
            ffn: Dgfn::new(channels, expansion, prior_dim, vb.pp("ffn"))?,
        })
    }

    pub fn attention(&self) -> &Dmta {
        &self.attn
    }

    pub fn forward(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward_channels(x)?, z)?)?;
        Ok((&x + self.ffn.forward(&self.norm2.forward_channels(&x)?, z)?)?)
    }
}

/// Heads and block counts of one level of the restorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelInfo {
    pub level: usize,
    pub channels: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    /// Zero for the bottleneck level, which has no decoder side.
    pub decoder_blocks: usize,
}

#[derive(Debug, Clone)]
struct Resample {
    conv: Conv2d,
    down: bool,
}

impl Resample {
    /// Halve the resolution and double the channels.
    fn down(channels: usize, vb: VarBuilder) -> Result<Self> {
        let conv = conv2d_no_bias(channels, channels / 2, 3, Conv2dConfig { padding: 1, ..Default::default() }, vb)?;
        Ok(Self { conv, down: true })
    }

    /// Double the resolution and halve the channels.
    fn up(channels: usize, vb: VarBuilder) -> Result<Self> {
        let conv = conv2d_no_bias(channels, channels * 2, 3, Conv2dConfig { padding: 1, ..Default::default() }, vb)?;
        Ok(Self { conv, down: false })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        Ok(if self.down {
            candle_nn::ops::pixel_unshuffle(&y, 2)?
        } else {
            candle_nn::ops::pixel_shuffle(&y, 2)?
        })
    }
}

/// U-shaped image restorer whose blocks are modulated by a prior vector.
#[derive(Debug, Clone)]
pub struct Restorer {
    embed: Conv2d,
    encoders: Vec<Vec<DynamicTransformerBlock>>,
    downs: Vec<Resample>,
    ups: Vec<Resample>,
    reduces: Vec<Option<Conv2d>>,
    decoders: Vec<Vec<DynamicTransformerBlock>>,
    output: Conv2d,
    levels: Vec<LevelInfo>,
}

impl Restorer {
    pub fn new(
        base_channels: usize,
        heads: &[usize],
        blocks: &[usize],
        expansion: usize,
        prior_dim: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let n = heads.len();
        if n == 0 || blocks.len() != n {
            return Err(Error::Config("heads and blocks must be non-empty and equally long".into()));
        }
        let width = |l: usize| base_channels << l;
        let stack = |count: usize, ch: usize, h: usize, vb: VarBuilder| -> Result<Vec<DynamicTransformerBlock>> {
            (0..count)
                .map(|i| DynamicTransformerBlock::new(ch, h, expansion, prior_dim, vb.pp(i.to_string())))
                .collect()
        };
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for l in 0..n {
            encoders.push(stack(blocks[l], width(l), heads[l], vb.pp(format!("encoder{l}")))?);
            if l + 1 < n {
                downs.push(Resample::down(width(l), vb.pp(format!("down{l}")))?);
            }
        }
        // decoders[l] runs at level l, for l = n-2 down to 0
        let mut ups = Vec::new();
        let mut reduces = Vec::new();
        let mut decoders = Vec::new();
        for l in (0..n.saturating_sub(1)).rev() {
            ups.push(Resample::up(width(l + 1), vb.pp(format!("up{l}")))?);
            let reduce = if l > 0 {
                Some(conv2d_no_bias(2 * width(l), width(l), 1, Conv2dConfig::default(), vb.pp(format!("reduce{l}")))?)
            } else {
                None
            };
            let ch = if l > 0 { width(l) } else { 2 * width(0) };
            reduces.push(reduce);
            decoders.push(stack(blocks[l], ch, heads[l], vb.pp(format!("decoder{l}")))?);
        }
        let out_ch = if n > 1 { 2 * base_channels } else { base_channels };
        let levels = (0..n)
            .map(|l| LevelInfo {
                level: l + 1,
                channels: width(l),
                heads: heads[l],
                encoder_blocks: blocks[l],
                decoder_blocks: if l + 1 < n { blocks[l] } else { 0 },
            })
            .collect();
        Ok(Self {
            embed: conv3x3(3, base_channels, 1, vb.pp("embed"))?,
            encoders,
            downs,
            ups,
            reduces,
            decoders,
            output: zero_conv3x3(out_ch, 3, vb.pp("output"))?,
            levels,
        })
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    /// Heads counted from the built blocks of every level, encoder side first.
    pub fn introspect(&self) -> Vec<(usize, Vec<usize>)> {
        let n = self.encoders.len();
        (0..n)
            .map(|l| {
                let mut heads: Vec<usize> = self.encoders[l].iter().map(|b| b.attention().heads()).collect();
                if l + 1 < n {
                    let d = n - 2 - l;
                    heads.extend(self.decoders[d].iter().map(|b| b.attention().heads()));
                }
                (l + 1, heads)
            })
            .collect()
    }

    pub fn first_block(&self) -> Option<&DynamicTransformerBlock> {
        self.encoders.first().and_then(|e| e.first())
    }

    /// Residual correction of a decoded `(batch, 3, H, W)` image; the result is
    /// not yet clamped.
    pub fn forward(&self, decoded: &Tensor, z: &Tensor) -> Result<Tensor> {
        let n = self.encoders.len();
        let mut x = self.embed.forward(decoded)?;
        let mut skips = Vec::with_capacity(n);
        for l in 0..n {
            for block in &self.encoders[l] {
                x = block.forward(&x, z)?;
            }
            if l + 1 < n {
                skips.push(x.clone());
                x = self.downs[l].forward(&x)?;
            }
        }
        for (d, l) in (0..n.saturating_sub(1)).rev().enumerate() {
            x = self.ups[d].forward(&x)?;
            x = Tensor::cat(&[&x, &skips[l]], 1)?;
            if let Some(reduce) = &self.reduces[d] {
                x = reduce.forward(&x)?;
            }
            for block in &self.decoders[d] {
                x = block.forward(&x, z)?;
            }
        }
        Ok((self.output.forward(&x)? + decoded)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn dmta_attention_is_channel_sized() {
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F64, &Device::Cpu);
        let dmta = Dmta::new(8, 2, 12, vb).unwrap();
        let z = Tensor::randn(0f64, 1.0, (1, 12), &Device::Cpu).unwrap();
        for side in [8, 16] {
            let x = Tensor::randn(0f64, 1.0, (1, 8, side, side), &Device::Cpu).unwrap();
            let (out, attn) = dmta.forward_with_attention(&x, &z).unwrap();
            assert_eq!(out.dims(), x.dims());
            assert_eq!(attn.dims(), &[1, 2, 4, 4]);
        }
    }

    #[test]
    fn restorer_levels_match_config() {
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        let r = Restorer::new(8, &[1, 2, 4, 8], &[3, 5, 6, 6], 2, 16, vb).unwrap();
        let want = [(1, 1, 3), (2, 2, 5), (3, 4, 6), (4, 8, 6)];
        for (info, (level, heads, blocks)) in r.levels().iter().zip(want) {
            assert_eq!((info.level, info.heads, info.encoder_blocks), (level, heads, blocks));
        }
        for (level, heads) in r.introspect() {
            let (_, h, b) = want[level - 1];
            let expected = if level < 4 { 2 * b } else { b };
            assert_eq!(heads.len(), expected);
            assert!(heads.iter().all(|x| *x == h));
        }
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let z = Tensor::randn(0f32, 1.0, (2, 16), &Device::Cpu).unwrap();
        assert_eq!(r.forward(&x, &z).unwrap().dims(), &[2, 3, 16, 16]);
    }

    #[test]
    fn prior_encoder_output_dim() {
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        let p = PriorEncoder::new(6, 96, 5, vb).unwrap();
        let x = Tensor::rand(0f32, 1.0, (3, 6, 32, 32), &Device::Cpu).unwrap();
        assert_eq!(p.forward(&x).unwrap().dims(), &[3, 384]);
        let x = Tensor::rand(0f32, 1.0, (1, 6, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(p.forward(&x).unwrap().dims(), &[1, 384]);
    }

    #[test]
    fn time_embedding_is_bounded() {
        let e = time_embedding(3, 32);
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(time_embedding(1, 32), time_embedding(2, 32));
    }
}
