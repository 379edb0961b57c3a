//! Joint source-channel codec mapping images to channel-ready latents and back.
//!
//! Two backbones share the same latent budget:
//!
//! * `swin`: patch partition (4×4) → linear embedding → two swin layers →
//!   patch merging → two swin layers → fully connected head to `C` channels.
//!   Every swin layer receives an embedding of the transmission SNR. The
//!   decoder mirrors the encoder.
//! * `cnn`: the convolutional DeepJSCC-style baseline in [`cnn`].
//!
//! Both produce a latent of shape `(batch, H/8, W/8, C)`.

pub mod cnn;
pub mod image;
pub mod swin;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

pub use self::image::{ImageBatch, SPATIAL_FACTOR};
pub use self::swin::{
    merge_tokens, patch_partition, patch_unpartition, unmerge_tokens, PatchMerge, PatchSplit, SnrBuckets, SwinBlock,
    SwinStage, SwinStageConfig, TargetEmbedding, TokenGrid,
};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const PATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Swin,
    Cnn,
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "swin" => Ok(Backbone::Swin),
            "cnn" => Ok(Backbone::Cnn),
            other => Err(Error::UnknownBackbone(other.to_string())),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Swin => "swin",
            Backbone::Cnn => "cnn",
        })
    }
}

/// Architecture of a codec. Stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub backbone: Backbone,
    /// Latent channels `C`.
    pub latent_channels: usize,
    /// Token dim of the first swin stage; the second stage uses twice this.
    pub embed_dim: usize,
    pub window_sizes: [usize; 2],
    pub num_heads: usize,
    pub layers_per_stage: usize,
    pub mlp_ratio: usize,
    pub cnn_filters: usize,
    pub snr_buckets: SnrBuckets,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Swin,
            latent_channels: 32,
            embed_dim: 64,
            window_sizes: [4, 2],
            num_heads: 4,
            layers_per_stage: 2,
            mlp_ratio: 4,
            cnn_filters: 64,
            snr_buckets: SnrBuckets { lo_db: 1, hi_db: 13 },
        }
    }
}

impl CodecConfig {
    pub fn stage_configs(&self) -> [SwinStageConfig; 2] {
        let stage = |i: usize| SwinStageConfig {
            patch_size: if i == 0 { PATCH } else { 2 },
            window_size: self.window_sizes[i],
            shift: self.window_sizes[i] / 2,
            embed_dim: self.embed_dim << i,
            num_heads: self.num_heads,
            num_layers: self.layers_per_stage,
        };
        [stage(0), stage(1)]
    }

    /// Latent `(H/8, W/8, C)` for an `H × W` image.
    pub fn latent_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        (height / SPATIAL_FACTOR, width / SPATIAL_FACTOR, self.latent_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.embed_dim == 0 || self.cnn_filters == 0 {
            return Err(Error::Config("codec widths must be positive".into()));
        }
        if self.mlp_ratio == 0 || self.layers_per_stage == 0 {
            return Err(Error::Config("mlp_ratio and layers_per_stage must be positive".into()));
        }
        for s in self.stage_configs() {
            if s.num_heads == 0 || s.embed_dim % s.num_heads != 0 {
                return Err(Error::Config(format!(
                    "stage dim {} not divisible by {} heads",
                    s.embed_dim, s.num_heads
                )));
            }
            if s.window_size == 0 {
                return Err(Error::Config("window size must be positive".into()));
            }
        }
        SnrBuckets::new(self.snr_buckets.lo_db, self.snr_buckets.hi_db)?;
        Ok(())
    }
}

/// Encoder output `(batch, H/8, W/8, C)`: the transmitted payload.
#[derive(Debug, Clone)]
pub struct LatentCode {
    values: Tensor,
}

impl LatentCode {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Shape(format!(
                "latent must be (batch, H/8, W/8, C), got {:?}",
                values.dims()
            )));
        }
        let total: f64 = values.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar()?;
        if !total.is_finite() {
            return Err(Error::Shape("latent contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[3]
    }

    /// `(batch, rows, cols, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Real values per image.
    pub fn reals_per_image(&self) -> usize {
        let (_, r, c, ch) = self.dims();
        r * c * ch
    }
}

#[derive(Debug, Clone)]
pub struct SwinEncoder {
    embed: Linear,
    stage1: SwinStage,
    merge: PatchMerge,
    stage2: SwinStage,
    head: Linear,
}

impl SwinEncoder {
    pub fn new(cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        let [s1, s2] = cfg.stage_configs();
        Ok(Self {
            embed: linear(PATCH * PATCH * 3, s1.embed_dim, vb.pp("patch_embed"))?,
            stage1: SwinStage::new(s1, cfg.mlp_ratio, cfg.snr_buckets, vb.pp("stage1"))?,
            merge: PatchMerge::new(s1.embed_dim, s2.embed_dim, vb.pp("merge"))?,
            stage2: SwinStage::new(s2, cfg.mlp_ratio, cfg.snr_buckets, vb.pp("stage2"))?,
            head: linear(s2.embed_dim, cfg.latent_channels, vb.pp("head"))?,
        })
    }

    pub fn stages(&self) -> [&SwinStage; 2] {
        [&self.stage1, &self.stage2]
    }

    pub fn forward(&self, pixels: &Tensor, snr_db: f64) -> Result<Tensor> {
        let grid = patch_partition(pixels, PATCH)?;
        let x = TokenGrid::new(self.embed.forward(grid.tensor())?.relu()?)?;
        let x = self.stage1.forward(&x, snr_db)?;
        let x = TokenGrid::new(self.merge.forward(&x)?.tensor().relu()?)?;
        let x = self.stage2.forward(&x, snr_db)?;
        Ok(self.head.forward(x.tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinDecoder {
    head: Linear,
    stage2: SwinStage,
    split: PatchSplit,
    stage1: SwinStage,
    unembed: Linear,
}

impl SwinDecoder {
    pub fn new(cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        let [s1, s2] = cfg.stage_configs();
        Ok(Self {
            head: linear(cfg.latent_channels, s2.embed_dim, vb.pp("head"))?,
            stage2: SwinStage::new(s2, cfg.mlp_ratio, cfg.snr_buckets, vb.pp("stage2"))?,
            split: PatchSplit::new(s2.embed_dim, s1.embed_dim, vb.pp("split"))?,
            stage1: SwinStage::new(s1, cfg.mlp_ratio, cfg.snr_buckets, vb.pp("stage1"))?,
            unembed: linear(s1.embed_dim, PATCH * PATCH * 3, vb.pp("patch_unembed"))?,
        })
    }

    /// Latent `(batch, h, w, C)` → pre-activation pixels `(batch, 8h, 8w, 3)`.
    pub fn forward(&self, latent: &Tensor, snr_db: f64) -> Result<Tensor> {
        let x = TokenGrid::new(self.head.forward(latent)?.relu()?)?;
        let x = self.stage2.forward(&x, snr_db)?;
        let x = TokenGrid::new(self.split.forward(&x)?.tensor().relu()?)?;
        let x = self.stage1.forward(&x, snr_db)?;
        let x = TokenGrid::new(self.unembed.forward(x.tensor())?)?;
        patch_unpartition(&x, PATCH)
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Swin(SwinEncoder),
    Cnn(cnn::CnnEncoder),
}

#[derive(Debug, Clone)]
enum Decoder {
    Swin(SwinDecoder),
    Cnn(cnn::CnnDecoder),
}

/// Encoder/decoder pair with its parameters.
#[derive(Debug, Clone)]
pub struct SemanticCodec {
    cfg: CodecConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    dtype: DType,
    device: Device,
}

impl SemanticCodec {
    /// Builds a codec whose parameters are created (or reused) in `store`
    /// under `encoder.*` and `decoder.*`.
    pub fn new(cfg: CodecConfig, store: &ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let vb = store.var_builder(dtype, device);
        let (encoder, decoder) = match cfg.backbone {
            Backbone::Swin => (
                Encoder::Swin(SwinEncoder::new(&cfg, vb.pp("encoder"))?),
                Decoder::Swin(SwinDecoder::new(&cfg, vb.pp("decoder"))?),
            ),
            Backbone::Cnn => (
                Encoder::Cnn(cnn::CnnEncoder::new(cfg.cnn_filters, cfg.latent_channels, vb.pp("encoder"))?),
                Decoder::Cnn(cnn::CnnDecoder::new(cfg.cnn_filters, cfg.latent_channels, vb.pp("decoder"))?),
            ),
        };
        Ok(Self {
            cfg,
            store: store.clone(),
            encoder,
            decoder,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> Backbone {
        self.cfg.backbone
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn swin_encoder(&self) -> Option<&SwinEncoder> {
        match &self.encoder {
            Encoder::Swin(e) => Some(e),
            Encoder::Cnn(_) => None,
        }
    }

    pub fn encode(&self, image: &ImageBatch, snr_db: f64) -> Result<LatentCode> {
        let pixels = image.pixels().to_dtype(self.dtype)?;
        let values = match &self.encoder {
            Encoder::Swin(enc) => {
                let [s1, s2] = self.cfg.stage_configs();
                s1.validate(image.height() / PATCH, image.width() / PATCH)
                    .and_then(|_| s2.validate(image.height() / SPATIAL_FACTOR, image.width() / SPATIAL_FACTOR))
                    .map_err(|e| Error::Shape(format!("image {}x{}: {e}", image.height(), image.width())))?;
                enc.forward(&pixels, snr_db)?
            }
            Encoder::Cnn(enc) => {
                let nchw = pixels.permute((0, 3, 1, 2))?.contiguous()?;
                enc.forward(&nchw)?.permute((0, 2, 3, 1))?.contiguous()?
            }
        };
        LatentCode::new(values)
    }

    /// Decodes a latent (or a received, equalised latent-shaped tensor) to images
    /// squashed and clamped into `[0, 1]`.
    pub fn decode(&self, latent: &LatentCode, snr_db: f64) -> Result<ImageBatch> {
        let (_, rows, cols, ch) = latent.dims();
        if ch != self.cfg.latent_channels || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "latent has {ch} channels on a {rows}x{cols} grid, codec expects {}",
                self.cfg.latent_channels
            )));
        }
        let values = latent.values().to_dtype(self.dtype)?;
        let raw = match &self.decoder {
            Decoder::Swin(dec) => {
                let [s1, s2] = self.cfg.stage_configs();
                s2.validate(rows, cols)
                    .and_then(|_| s1.validate(rows * 2, cols * 2))
                    .map_err(|e| Error::Shape(format!("latent grid {rows}x{cols}: {e}")))?;
                dec.forward(&values, snr_db)?
            }
            Decoder::Cnn(dec) => {
                let nchw = values.permute((0, 3, 1, 2))?.contiguous()?;
                dec.forward(&nchw)?.permute((0, 2, 3, 1))?.contiguous()?
            }
        };
        ImageBatch::new(candle_nn::ops::sigmoid(&raw)?.clamp(0.0, 1.0)?)
    }
}

/// Mean squared error over every pixel, as a differentiable scalar.
pub fn codec_loss(original: &ImageBatch, reconstructed: &ImageBatch) -> Result<Tensor> {
    if !original.same_shape(reconstructed) {
        return Err(Error::DimensionMismatch(format!(
            "loss over {:?} vs {:?}",
            original.pixels().dims(),
            reconstructed.pixels().dims()
        )));
    }
    let a = original.pixels().to_dtype(reconstructed.dtype())?;
    Ok((a - reconstructed.pixels())?.sqr()?.mean_all()?)
}
