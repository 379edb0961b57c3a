//! Separation-based baseline: JPEG source coding, LDPC channel coding and
//! Gray 4-QAM over the same simulated channel as the learned system.
//!
//! A frame that fails its parity checks makes the whole image unusable; the
//! receiver then outputs a mid-gray image so PSNR stays defined.

pub mod ldpc;
pub mod qam;

use std::io::Cursor;

use candle_core::{DType, Device};
use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use serde::{Deserialize, Serialize};

pub use self::ldpc::{Bitstream, LdpcCode, LLR_CLIP};
pub use self::qam::{demodulate_interleaved, hard_decision, modulate_interleaved, qam_demodulate, qam_modulate};
use crate::channel::{transmit, ChannelSpec};
use crate::error::{Error, Result};
use crate::semantic_codec::ImageBatch;

/// Pixel value shown when decoding fails.
pub const MID_GRAY: f64 = 0.5;

/// Seed of the parity-check construction, so every run uses the same code.
pub const LDPC_SEED: u64 = 0x1dbc_0de5;

const COLUMN_WEIGHT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdpcConfig {
    pub n: usize,
    pub k: usize,
    pub max_iters: usize,
}

impl Default for LdpcConfig {
    fn default() -> Self {
        Self {
            n: 1024,
            k: 512,
            max_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub jpeg_quality: u8,
    pub ldpc: LdpcConfig,
    pub qam_order: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            jpeg_quality: 75,
            ldpc: LdpcConfig::default(),
            qam_order: 4,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::Config(format!("jpeg_quality {} outside 1..=100", self.jpeg_quality)));
        }
        if self.qam_order != 4 {
            return Err(Error::Config(format!("only 4-QAM is supported, got {}", self.qam_order)));
        }
        if self.ldpc.max_iters == 0 {
            return Err(Error::Config("ldpc.max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// JPEG bytes of a single-image batch, as bits.
pub fn jpeg_encode(image: &ImageBatch, quality: u8) -> Result<Bitstream> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!("jpeg quality {quality} outside 1..=100")));
    }
    if image.batch() != 1 {
        return Err(Error::Shape(format!("jpeg_encode takes one image, got {}", image.batch())));
    }
    let rgb = image.to_rgb8(0)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(
        &rgb,
        image.width() as u32,
        image.height() as u32,
        ExtendedColorType::Rgb8,
    )?;
    Ok(Bitstream::from_bytes(&buf))
}

/// Decodes JPEG bits into a single-image batch of the expected size.
pub fn jpeg_decode(bits: &Bitstream, height: usize, width: usize, dtype: DType, device: &Device) -> Result<ImageBatch> {
    let bytes = bits.to_bytes();
    let img = image::load(Cursor::new(&bytes), ImageFormat::Jpeg)?.to_rgb8();
    if img.height() as usize != height || img.width() as usize != width {
        return Err(Error::Shape(format!(
            "decoded {}x{} image, expected {height}x{width}",
            img.height(),
            img.width()
        )));
    }
    ImageBatch::from_rgb8(img.as_raw(), height, width, dtype, device)
}

/// Per-image result of one baseline transmission.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub images: ImageBatch,
    pub ok: Vec<bool>,
    pub frames: Vec<usize>,
    pub failed_frames: Vec<usize>,
    /// Channel symbols spent on each image.
    pub symbols: Vec<usize>,
}

/// Baseline transmitter/receiver with its parity-check code built once.
#[derive(Debug, Clone)]
pub struct ClassicalBaseline {
    cfg: BaselineConfig,
    code: LdpcCode,
}

impl ClassicalBaseline {
    pub fn new(cfg: BaselineConfig) -> Result<Self> {
        cfg.validate()?;
        let code = LdpcCode::regular(cfg.ldpc.n, cfg.ldpc.k, COLUMN_WEIGHT, LDPC_SEED)?;
        Ok(Self { cfg, code })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.cfg
    }

    pub fn code(&self) -> &LdpcCode {
        &self.code
    }

    /// Splits `bits` into zero-padded `k`-bit frames and encodes each.
    pub fn channel_encode(&self, bits: &Bitstream) -> Result<Vec<Bitstream>> {
        let k = self.code.k();
        bits.bits()
            .chunks(k)
            .map(|chunk| {
                let mut m = chunk.to_vec();
                m.resize(k, 0);
                self.code.encode(&Bitstream::new(m)?)
            })
            .collect()
    }

    /// Transmits every image of the batch separately; image `i` uses channel
    /// seed `seed + i`.
    pub fn transmit(&self, images: &ImageBatch, spec: &ChannelSpec, seed: u64) -> Result<BaselineOutput> {
        let (h, w) = (images.height(), images.width());
        let device = images.pixels().device().clone();
        let mut out = Vec::with_capacity(images.batch());
        let mut ok = Vec::new();
        let mut frames = Vec::new();
        let mut failed_frames = Vec::new();
        let mut symbols = Vec::new();
        for i in 0..images.batch() {
            let source = jpeg_encode(&images.image(i)?, self.cfg.jpeg_quality)?;
            let codewords = self.channel_encode(&source)?;
            let coded: Vec<u8> = codewords.iter().flat_map(|c| c.bits().iter().copied()).collect();
            let tx = qam_modulate(&Bitstream::new(coded)?, &device)?;
            let (rx, real) = transmit(&tx, spec, seed.wrapping_add(i as u64))?;
            let variance: Vec<f64> = real.effective_noise_variance.get(0)?.to_vec1()?;
            let llr = demodulate_interleaved(&rx.row_interleaved(0)?, &variance)?;
            let mut message = Vec::with_capacity(codewords.len() * self.code.k());
            let mut failed = 0;
            for frame in llr.chunks(self.code.n()) {
                let (bits, success) = self.code.decode(frame, self.cfg.ldpc.max_iters)?;
                failed += usize::from(!success);
                message.extend_from_slice(bits.bits());
            }
            message.truncate(source.len());
            let decoded = if failed == 0 {
                jpeg_decode(&Bitstream::new(message)?, h, w, images.dtype(), &device).ok()
            } else {
                None
            };
            ok.push(decoded.is_some());
            frames.push(codewords.len());
            failed_frames.push(failed);
            symbols.push(tx.len());
            out.push(match decoded {
                Some(img) => img,
                None => ImageBatch::constant(1, h, w, MID_GRAY, images.dtype(), &device)?,
            });
        }
        Ok(BaselineOutput {
            images: ImageBatch::concat(&out)?,
            ok,
            frames,
            failed_frames,
            symbols,
        })
    }
}

/// Convenience wrapper building the code from `cfg`.
pub fn baseline_transmit(
    images: &ImageBatch,
    spec: &ChannelSpec,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<BaselineOutput> {
    ClassicalBaseline::new(*cfg)?.transmit(images, spec, seed)
}
