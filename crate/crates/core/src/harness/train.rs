//! Codec training and the two-stage refiner training.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointKind, TrainState};
use super::config::ExperimentConfig;
use super::dataset::Dataset;
use crate::channel::{transmit_latent, ChannelKind, ChannelSpec};
use crate::diffusion_refiner::{RefinerConfig, SemanticRefiner};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamParams, ParamStore};
use crate::semantic_codec::{codec_loss, CodecConfig, ImageBatch, SemanticCodec};

/// Parameters are kept in single precision for training.
pub const TRAIN_DTYPE: DType = DType::F32;

pub const LOSS_MSE: &str = "mse";
pub const LOSS_STAGE_A_L1: &str = "stage_a.l1";
pub const LOSS_STAGE_B_L1: &str = "stage_b.l1";
pub const LOSS_STAGE_B_L2: &str = "stage_b.l2";
pub const LOSS_STAGE_B_JOINT: &str = "stage_b.joint";

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(value: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("{what} = {value}; lower the learning rate or check the inputs"),
        });
    }
    Ok(())
}

/// Channel draw for one training batch: type chosen uniformly from the
/// configured list, SNR uniform over the training range.
fn draw_channel(exp: &ExperimentConfig, rng: &mut ChaCha8Rng) -> (ChannelSpec, u64) {
    let kinds = &exp.channel.types;
    let kind: ChannelKind = kinds[rng.random_range(0..kinds.len())];
    let [lo, hi] = exp.training.snr_range;
    let snr_db = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let spec = ChannelSpec {
        kind,
        snr_db,
        mask_density: exp.channel.mask_density,
    };
    (spec, rng.random())
}

/// A codec together with the optimizer that trains it.
pub struct CodecRun {
    pub codec: SemanticCodec,
    pub optimizer: Adam,
    pub state: TrainState,
}

impl CodecRun {
    /// Fresh weights seeded from the experiment's `init` stream.
    pub fn new(exp: &ExperimentConfig, cfg: &CodecConfig, device: &Device) -> Result<Self> {
        let store = ParamStore::new(exp.seed_for("init"));
        let codec = SemanticCodec::new(cfg.clone(), &store, TRAIN_DTYPE, device)?;
        let optimizer = Adam::new(store.vars(), AdamParams::with_lr(exp.training.lr))?;
        Ok(Self {
            codec,
            optimizer,
            state: TrainState::default(),
        })
    }

    /// Restores weights, optimizer moments and progress from a checkpoint.
    pub fn resume(exp: &ExperimentConfig, ck: &Checkpoint, device: &Device) -> Result<Self> {
        let cfg: CodecConfig = serde_json::from_str(&ck.config)?;
        let mut run = Self::new(exp, &cfg, device)?;
        run.codec.params().load_tensors(&ck.params_map())?;
        run.optimizer.load_state(&ck.optimizer_map(), ck.state.optimizer_steps)?;
        run.state = ck.state.clone();
        Ok(run)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CheckpointKind::Codec,
            config: serde_json::to_string(self.codec.config())?,
            state: self.state.clone(),
            params: self.codec.params().tensors(),
            optimizer: self.optimizer.state(),
        })
    }

    /// Trains until `epochs` epochs are done in total. Epoch `e` shuffles and
    /// draws channels from seeds derived from `e` alone, so a resumed run
    /// continues exactly where an uninterrupted one would be.
    pub fn train(&mut self, exp: &ExperimentConfig, data: &Dataset, epochs: usize) -> Result<()> {
        let device = self.codec.device().clone();
        for epoch in self.state.epochs_done..epochs {
            let batches = data.epoch_batches(exp.training.batch, exp.seed_for("codec.order") ^ epoch as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(exp.seed_for("codec.channel") ^ epoch as u64);
            let (mut sum, mut count) = (0.0, 0usize);
            for (step, idx) in batches.iter().enumerate() {
                let images = data.batch(idx, TRAIN_DTYPE, &device)?;
                let (spec, noise_seed) = draw_channel(exp, &mut rng);
                let latent = self.codec.encode(&images, spec.snr_db)?;
                let received = transmit_latent(&latent, &spec, noise_seed)?;
                let recon = self.codec.decode(&received, spec.snr_db)?;
                let loss = codec_loss(&images, &recon)?;
                let value = scalar(&loss)?;
                check_finite(value, epoch, step, "codec MSE")?;
                self.optimizer.step(&loss.backward()?)?;
                sum += value * idx.len() as f64;
                count += idx.len();
            }
            let mean = sum / count.max(1) as f64;
            self.state.losses.entry(LOSS_MSE.into()).or_default().push(mean);
            self.state.epochs_done = epoch + 1;
            self.state.optimizer_steps = self.optimizer.step_count();
            info!("codec epoch {} mse {mean:.6}", epoch + 1);
        }
        Ok(())
    }
}

/// Loads a codec for inference.
pub fn load_codec(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<SemanticCodec> {
    let cfg: CodecConfig = serde_json::from_str(&ck.config)?;
    let codec = SemanticCodec::new(cfg, &ParamStore::new(0), dtype, device)?;
    codec.params().load_tensors(&ck.params_map())?;
    Ok(codec)
}

/// Loads a refiner for inference.
pub fn load_refiner(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<SemanticRefiner> {
    let cfg: RefinerConfig = serde_json::from_str(&ck.config)?;
    let refiner = SemanticRefiner::new(cfg, &ParamStore::new(0), dtype, device)?;
    refiner.params().load_tensors(&ck.params_map())?;
    Ok(refiner)
}

/// Same-position square crop of a whole batch.
fn crop(images: &ImageBatch, y: usize, x: usize, size: usize) -> Result<ImageBatch> {
    ImageBatch::new(images.pixels().narrow(1, y, size)?.narrow(2, x, size)?.contiguous()?)
}

/// Produces `(reference, decoded)` training pairs by sending images through
/// the frozen codec.
struct PairSource<'a> {
    exp: &'a ExperimentConfig,
    codec: &'a SemanticCodec,
    data: &'a Dataset,
}

impl PairSource<'_> {
    fn pair(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<(ImageBatch, ImageBatch)> {
        let device = self.codec.device().clone();
        let images = self.data.batch(idx, TRAIN_DTYPE, &device)?;
        let (spec, noise_seed) = draw_channel(self.exp, rng);
        let latent = self.codec.encode(&images, spec.snr_db)?;
        let received = transmit_latent(&latent, &spec, noise_seed)?;
        let decoded = self.codec.decode(&received, spec.snr_db)?;
        let decoded = ImageBatch::new(decoded.pixels().detach().to_dtype(TRAIN_DTYPE)?)?;
        let patch = self.exp.refiner.patch;
        let side = images.height().min(images.width());
        if patch >= side {
            return Ok((images, decoded));
        }
        let y = rng.random_range(0..=images.height() - patch);
        let x = rng.random_range(0..=images.width() - patch);
        Ok((crop(&images, y, x, patch)?, crop(&decoded, y, x, patch)?))
    }
}

/// The refiner plus what is needed to keep training it.
pub struct RefinerRun {
    pub refiner: SemanticRefiner,
    pub state: TrainState,
}

impl RefinerRun {
    pub fn new(exp: &ExperimentConfig, device: &Device) -> Result<Self> {
        let store = ParamStore::new(exp.seed_for("refiner.init"));
        let refiner = SemanticRefiner::new(exp.refiner.clone(), &store, TRAIN_DTYPE, device)?;
        Ok(Self {
            refiner,
            state: TrainState::default(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut state = self.state.clone();
        state
            .notes
            .insert("schedule".into(), serde_json::to_string(self.refiner.schedule())?);
        Ok(Checkpoint {
            kind: CheckpointKind::Refiner,
            config: serde_json::to_string(self.refiner.config())?,
            state,
            params: self.refiner.params().tensors(),
            optimizer: BTreeMap::new(),
        })
    }

    /// Stage A for `refiner.epochs` epochs, then (unless `stage_a_only`)
    /// stage B for as many epochs.
    pub fn train(
        &mut self,
        exp: &ExperimentConfig,
        codec: &SemanticCodec,
        data: &Dataset,
        stage_a_only: bool,
    ) -> Result<()> {
        let cfg = &exp.refiner;
        let pairs = PairSource { exp, codec, data };
        let mut epoch_index = 0usize;

        let mut adam = Adam::new(self.refiner.stage_a_vars(), AdamParams::with_lr(cfg.lr))?;
        for epoch in 0..cfg.epochs {
            let batches = data.epoch_batches(cfg.batch, exp.seed_for("refiner.a.order") ^ epoch as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(exp.seed_for("refiner.a.channel") ^ epoch as u64);
            let (mut sum, mut count) = (0.0, 0usize);
            for (step, idx) in batches.iter().enumerate() {
                let (reference, decoded) = pairs.pair(idx, &mut rng)?;
                let loss = self.refiner.stage_a_loss(&reference, &decoded)?;
                let value = scalar(&loss)?;
                check_finite(value, epoch_index, step, "stage A L1")?;
                adam.step(&loss.backward()?)?;
                sum += value * idx.len() as f64;
                count += idx.len();
            }
            let mean = sum / count.max(1) as f64;
            self.state.losses.entry(LOSS_STAGE_A_L1.into()).or_default().push(mean);
            epoch_index += 1;
            info!("refiner stage A epoch {} l1 {mean:.6}", epoch + 1);
        }
        self.state.optimizer_steps += adam.step_count();

        if !stage_a_only {
            let mut adam = Adam::new(self.refiner.stage_b_vars(), AdamParams::with_lr(cfg.lr))?;
            for epoch in 0..cfg.epochs {
                let batches = data.epoch_batches(cfg.batch, exp.seed_for("refiner.b.order") ^ epoch as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(exp.seed_for("refiner.b.channel") ^ epoch as u64);
                let mut sums = [0.0f64; 3];
                let mut count = 0usize;
                for (step, idx) in batches.iter().enumerate() {
                    let (reference, decoded) = pairs.pair(idx, &mut rng)?;
                    let losses = self.refiner.stage_b_loss(&reference, &decoded, rng.random())?;
                    let values = [scalar(&losses.l1)?, scalar(&losses.l2)?, scalar(&losses.joint)?];
                    check_finite(values[2], epoch_index, step, "stage B joint loss")?;
                    adam.step(&losses.joint.backward()?)?;
                    for (s, v) in sums.iter_mut().zip(values) {
                        *s += v * idx.len() as f64;
                    }
                    count += idx.len();
                }
                let n = count.max(1) as f64;
                for (name, s) in [LOSS_STAGE_B_L1, LOSS_STAGE_B_L2, LOSS_STAGE_B_JOINT].into_iter().zip(sums) {
                    self.state.losses.entry(name.into()).or_default().push(s / n);
                }
                epoch_index += 1;
                info!(
                    "refiner stage B epoch {} l1 {:.6} l2 {:.6} joint {:.6}",
                    epoch + 1,
                    sums[0] / n,
                    sums[1] / n,
                    sums[2] / n
                );
            }
            self.state.optimizer_steps += adam.step_count();
        }
        self.state.epochs_done = epoch_index;
        Ok(())
    }
}
