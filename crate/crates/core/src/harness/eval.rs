//! Evaluation over the method × channel × SNR grid.

use candle_core::DType;
use log::info;

use super::config::{ExperimentConfig, Method};
use super::dataset::Dataset;
use super::report::GridRow;
use crate::channel::{transmit_latent, ChannelKind, ChannelSpec};
use crate::classical_baseline::ClassicalBaseline;
use crate::diffusion_refiner::SemanticRefiner;
use crate::error::Result;
use crate::metrics::{aggregate, psnr_per_image, ssim_per_image, CellKey, MetricKind, MetricReport, ResultsTable};
use crate::nn::stable_hash;
use crate::semantic_codec::{ImageBatch, SemanticCodec};

/// Evaluation runs in single precision, like training.
pub const EVAL_DTYPE: DType = DType::F32;

const REFINE_STREAM: u64 = 0x7265_6669_6e65;

/// Whatever models could be loaded. A method whose model is missing is
/// skipped.
#[derive(Default)]
pub struct Models {
    pub swin: Option<SemanticCodec>,
    pub cnn: Option<SemanticCodec>,
    pub refiner: Option<SemanticRefiner>,
    pub baseline: Option<ClassicalBaseline>,
}

impl Models {
    /// Why `method` cannot run, if it cannot.
    pub fn missing(&self, method: Method) -> Option<&'static str> {
        match method {
            Method::Nsf if self.swin.is_none() => Some("swin codec checkpoint"),
            Method::ScCdm if self.swin.is_none() => Some("swin codec checkpoint"),
            Method::ScCdm if self.refiner.is_none() => Some("refiner checkpoint"),
            Method::DeepJsccCnn if self.cnn.is_none() => Some("cnn codec checkpoint"),
            Method::JpegLdpcQam if self.baseline.is_none() => Some("baseline configuration"),
            _ => None,
        }
    }
}

/// Frame statistics of the separated baseline for one grid cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BaselineCell {
    pub channel: String,
    pub snr_db: f64,
    pub images: usize,
    pub decoded_ok: usize,
    pub frames: usize,
    pub failed_frames: usize,
    pub symbols: usize,
}

impl BaselineCell {
    pub fn ok_rate(&self) -> f64 {
        self.decoded_ok as f64 / self.images.max(1) as f64
    }

    pub fn frame_error_rate(&self) -> f64 {
        self.failed_frames as f64 / self.frames.max(1) as f64
    }

    /// Channel uses per source dimension.
    pub fn bandwidth_ratio(&self, side: usize) -> f64 {
        self.symbols as f64 / (self.images.max(1) * side * side * 3) as f64
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub table: ResultsTable,
    pub reports: Vec<MetricReport>,
    pub skipped: Vec<(Method, String)>,
    pub baseline: Vec<BaselineCell>,
}

/// Seed of one `(channel, snr, batch)` cell. Every method sees the same
/// channel noise in a cell.
pub fn cell_seed(exp: &ExperimentConfig, channel: ChannelKind, snr_db: f64, batch: usize) -> u64 {
    let mut key = channel.to_string().into_bytes();
    key.extend_from_slice(&snr_db.to_bits().to_le_bytes());
    exp.seed_for("eval") ^ stable_hash(&key) ^ (batch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Reconstructions of `images` for every runnable method, in `methods` order.
pub fn run_methods(
    models: &Models,
    methods: &[Method],
    images: &ImageBatch,
    spec: &ChannelSpec,
    seed: u64,
    baseline_cell: Option<&mut BaselineCell>,
) -> Result<Vec<(Method, ImageBatch)>> {
    let mut nsf: Option<ImageBatch> = None;
    let mut out = Vec::new();
    let mut baseline_cell = baseline_cell;
    for &m in methods {
        if models.missing(m).is_some() {
            continue;
        }
        let recon = match m {
            Method::Nsf | Method::ScCdm => {
                let decoded = match &nsf {
                    Some(d) => d.clone(),
                    None => {
                        let codec = models.swin.as_ref().expect("checked");
                        let d = send(codec, images, spec, seed)?;
                        nsf = Some(d.clone());
                        d
                    }
                };
                if m == Method::ScCdm {
                    let refiner = models.refiner.as_ref().expect("checked");
                    refiner.refine(&decoded, seed ^ REFINE_STREAM)?
                } else {
                    decoded
                }
            }
            Method::DeepJsccCnn => send(models.cnn.as_ref().expect("checked"), images, spec, seed)?,
            Method::JpegLdpcQam => {
                let out = models.baseline.as_ref().expect("checked").transmit(images, spec, seed)?;
                if let Some(cell) = baseline_cell.as_deref_mut() {
                    cell.images += out.ok.len();
                    cell.decoded_ok += out.ok.iter().filter(|&&ok| ok).count();
                    cell.frames += out.frames.iter().sum::<usize>();
                    cell.failed_frames += out.failed_frames.iter().sum::<usize>();
                    cell.symbols += out.symbols.iter().sum::<usize>();
                }
                out.images
            }
        };
        out.push((m, recon.to_dtype(images.dtype())?));
    }
    Ok(out)
}

fn send(codec: &SemanticCodec, images: &ImageBatch, spec: &ChannelSpec, seed: u64) -> Result<ImageBatch> {
    let latent = codec.encode(images, spec.snr_db)?;
    let received = transmit_latent(&latent, spec, seed)?;
    codec.decode(&received, spec.snr_db)
}

/// Mean PSNR/SSIM for every runnable method over every configured channel and
/// SNR on `data`.
pub fn evaluate(exp: &ExperimentConfig, models: &Models, data: &Dataset, methods: &[Method]) -> Result<EvalOutput> {
    let mut skipped = Vec::new();
    let mut runnable = Vec::new();
    for &m in methods {
        match models.missing(m) {
            Some(what) => skipped.push((m, format!("{m} skipped: no {what}"))),
            None => runnable.push(m),
        }
    }
    let device = candle_core::Device::Cpu;
    let batches = data.sequential_batches(exp.eval.batch);
    let mut reports = Vec::new();
    let mut baseline = Vec::new();
    for &kind in &exp.channel.types {
        for &snr_db in &exp.channel.snr_db {
            let spec = ChannelSpec {
                kind,
                snr_db,
                mask_density: exp.channel.mask_density,
            };
            let mut per_method: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); runnable.len()];
            let mut cell = BaselineCell {
                channel: kind.to_string(),
                snr_db,
                images: 0,
                decoded_ok: 0,
                frames: 0,
                failed_frames: 0,
                symbols: 0,
            };
            for (b, idx) in batches.iter().enumerate() {
                let images = data.batch(idx, EVAL_DTYPE, &device)?;
                let seed = cell_seed(exp, kind, snr_db, b);
                let outputs = run_methods(models, &runnable, &images, &spec, seed, Some(&mut cell))?;
                for (slot, (_, recon)) in per_method.iter_mut().zip(&outputs) {
                    slot.0.extend(psnr_per_image(&images, recon, 1.0)?);
                    slot.1.extend(ssim_per_image(&images, recon)?);
                }
            }
            for (m, (p, s)) in runnable.iter().zip(per_method) {
                let key = CellKey::new(m.name(), kind.to_string(), snr_db);
                info!("{} psnr {:.3}", key.id(), p.iter().sum::<f64>() / p.len().max(1) as f64);
                reports.push(MetricReport::new(MetricKind::Psnr, key.clone(), p));
                reports.push(MetricReport::new(MetricKind::Ssim, key, s));
            }
            if runnable.contains(&Method::JpegLdpcQam) {
                baseline.push(cell);
            }
        }
    }
    Ok(EvalOutput {
        table: aggregate(&reports),
        reports,
        skipped,
        baseline,
    })
}

/// Rows of the visual comparison: the originals, then each runnable method,
/// with per-image PSNR gains over the deepjscc-cnn row when that row exists.
pub fn comparison_grid(
    exp: &ExperimentConfig,
    models: &Models,
    data: &Dataset,
    methods: &[Method],
    channel: ChannelKind,
    snr_db: f64,
) -> Result<Vec<GridRow>> {
    let n = exp.eval.grid_images.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let images = data.batch(&idx, EVAL_DTYPE, &candle_core::Device::Cpu)?;
    let spec = ChannelSpec {
        kind: channel,
        snr_db,
        mask_density: exp.channel.mask_density,
    };
    let outputs = run_methods(models, methods, &images, &spec, cell_seed(exp, channel, snr_db, 0), None)?;
    let mut rows = vec![GridRow {
        label: "original".into(),
        images: images.clone(),
        psnr: Vec::new(),
        gain_percent: Vec::new(),
    }];
    let psnrs = outputs
        .iter()
        .map(|(_, r)| psnr_per_image(&images, r, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let reference = outputs.iter().position(|(m, _)| *m == Method::DeepJsccCnn).map(|i| psnrs[i].clone());
    for ((m, recon), p) in outputs.into_iter().zip(psnrs) {
        let gain_percent = match &reference {
            Some(r) if m != Method::DeepJsccCnn => p.iter().zip(r).map(|(a, b)| Some((a - b) / b * 100.0)).collect(),
            _ => vec![None; p.len()],
        };
        rows.push(GridRow {
            label: m.name().into(),
            images: recon,
            psnr: p,
            gain_percent,
        });
    }
    Ok(rows)
}
