//! Semantic refiner: a slim prior network condenses (reference, decoded) pairs
//! into a `4·C′` vector, a short diffusion chain learns to produce that vector
//! from the decoded image alone, and a U-shaped restorer uses it to modulate
//! its feature maps.
//!
//! Training is two-staged. Stage A fits the prior network and the restorer
//! with the reference image available. Stage B freezes the prior network,
//! trains the noise predictor (conditioned on features of the decoded image)
//! and fine-tunes the restorer on the diffused prior.

pub mod networks;
pub mod schedule;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use self::networks::{
    time_embedding, Dgfn, Dmta, DynamicTransformerBlock, EpsMlp, LevelInfo, NoisePredictor, PriorEncoder, Restorer,
};
pub use self::schedule::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::semantic_codec::ImageBatch;

/// Compact prior, one `4·C′` row per image.
#[derive(Debug, Clone)]
pub struct PriorRepresentation {
    z: Tensor,
}

impl PriorRepresentation {
    /// Wraps a `(batch, dim)` tensor, rejecting other shapes and non-finite values.
    pub fn new(z: Tensor, dim: usize) -> Result<Self> {
        match z.dims() {
            [_, d] if *d == dim => {}
            other => {
                return Err(Error::DimensionMismatch(format!(
                    "prior must be (batch, {dim}), got {other:?}"
                )))
            }
        }
        let sum: f64 = z.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar()?;
        if !sum.is_finite() {
            return Err(Error::Shape("prior contains non-finite values".into()));
        }
        Ok(Self { z })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    pub fn batch(&self) -> usize {
        self.z.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.z.dims()[1]
    }

    pub fn detach(&self) -> Self {
        Self { z: self.z.detach() }
    }

    pub fn to_vec(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.z.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// Which parts of the restorer stage B updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneScope {
    #[default]
    All,
    Modulation,
}

/// Architecture and training hyper-parameters. Stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub levels: usize,
    pub heads: Vec<usize>,
    pub blocks: Vec<usize>,
    /// `C′`; the prior has `4·C′` entries.
    pub prior_channels: usize,
    /// Restorer width at level 1, doubled at each level below.
    pub base_channels: usize,
    pub ffn_expansion: usize,
    pub prior_downsamples: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub time_embed_dim: usize,
    pub patch: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub finetune: FinetuneScope,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            heads: vec![1, 2, 4, 8],
            blocks: vec![3, 5, 6, 6],
            prior_channels: 96,
            base_channels: 48,
            ffn_expansion: 2,
            prior_downsamples: 5,
            timesteps: 4,
            beta_start: 0.10,
            beta_end: 0.99,
            time_embed_dim: 32,
            patch: 32,
            batch: 16,
            lr: 2e-4,
            epochs: 30,
            finetune: FinetuneScope::All,
        }
    }
}

impl RefinerConfig {
    pub fn prior_dim(&self) -> usize {
        4 * self.prior_channels
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.heads.len() != self.levels || self.blocks.len() != self.levels {
            return Err(Error::Config(format!(
                "{} levels need as many heads ({}) and block counts ({})",
                self.levels,
                self.heads.len(),
                self.blocks.len()
            )));
        }
        if self.prior_channels == 0 || self.base_channels == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config("refiner widths must be positive".into()));
        }
        for (l, h) in self.heads.iter().enumerate() {
            let ch = self.base_channels << l;
            if *h == 0 || ch % h != 0 {
                return Err(Error::Config(format!("level {} width {ch} not divisible by {h} heads", l + 1)));
            }
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and positive".into()));
        }
        if self.patch == 0 || self.patch % (1 << (self.levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "patch {} must be divisible by {}",
                self.patch,
                1 << (self.levels - 1)
            )));
        }
        self.schedule()?;
        Ok(())
    }
}

/// Whether the reference image is available to the prior network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Reference and decoded images are concatenated (6 channels).
    Training,
    /// Only the decoded image is seen; the result is the conditioning vector
    /// of the diffusion chain.
    Inference,
}

/// Differentiable stage-B losses.
#[derive(Debug, Clone)]
pub struct StageBLosses {
    pub l1: Tensor,
    pub l2: Tensor,
    pub joint: Tensor,
}

/// Runs the deterministic reverse chain from `t = T` down to `1`.
pub fn denoise(z_t: &Tensor, condition: &Tensor, schedule: &NoiseSchedule, model: &impl NoisePredictor) -> Result<Tensor> {
    let mut z = z_t.clone();
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&z, t, condition)?;
        z = schedule.reverse_step(&z, t, &eps)?;
    }
    Ok(z)
}

/// `‖I − Î‖₁` as the mean absolute pixel error.
pub fn loss_l1(target: &ImageBatch, refined: &ImageBatch) -> Result<Tensor> {
    if !target.same_shape(refined) {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            target.pixels().dims(),
            refined.pixels().dims()
        )));
    }
    let t = target.pixels().to_dtype(refined.dtype())?;
    Ok((t - refined.pixels())?.abs()?.mean_all()?)
}

/// Mean absolute error over the `4·C′` prior entries (averaged over the batch).
pub fn loss_l2(z_hat: &PriorRepresentation, z0: &PriorRepresentation) -> Result<Tensor> {
    if z_hat.tensor().dims() != z0.tensor().dims() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            z_hat.tensor().dims(),
            z0.tensor().dims()
        )));
    }
    let z0 = z0.tensor().to_dtype(z_hat.tensor().dtype())?;
    Ok((z_hat.tensor() - z0)?.abs()?.mean_all()?)
}

pub fn loss_joint(l1: &Tensor, l2: &Tensor) -> Result<Tensor> {
    Ok((l1 + l2)?)
}

/// Prior network, conditioning network, noise predictor and restorer, with
/// parameters under `prior.*`, `condition.*`, `eps.*` and `restorer.*`.
#[derive(Debug, Clone)]
pub struct SemanticRefiner {
    cfg: RefinerConfig,
    store: ParamStore,
    prior: PriorEncoder,
    condition: PriorEncoder,
    eps: EpsMlp,
    restorer: Restorer,
    schedule: NoiseSchedule,
    dtype: DType,
    device: Device,
}

impl SemanticRefiner {
    pub fn new(cfg: RefinerConfig, store: &ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let vb = store.var_builder(dtype, device);
        let c = cfg.prior_channels;
        let prior = PriorEncoder::new(6, c, cfg.prior_downsamples, vb.pp("prior"))?;
        let condition = PriorEncoder::new(3, c, cfg.prior_downsamples, vb.pp("condition"))?;
        let schedule = cfg.schedule()?;
        let eps = EpsMlp::new(cfg.prior_dim(), cfg.time_embed_dim, schedule.alpha_bar(), vb.pp("eps"))?;
        let restorer = Restorer::new(
            cfg.base_channels,
            &cfg.heads,
            &cfg.blocks,
            cfg.ffn_expansion,
            cfg.prior_dim(),
            vb.pp("restorer"),
        )?;
        Ok(Self {
            schedule,
            cfg,
            store: store.clone(),
            prior,
            condition,
            eps,
            restorer,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn restorer(&self) -> &Restorer {
        &self.restorer
    }

    pub fn eps_model(&self) -> &EpsMlp {
        &self.eps
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Parameters updated in stage A.
    pub fn stage_a_vars(&self) -> Vec<(String, Var)> {
        let mut v = self.store.vars_with_prefix("prior.");
        v.extend(self.store.vars_with_prefix("restorer."));
        v
    }

    /// Parameters updated in stage B.
    pub fn stage_b_vars(&self) -> Vec<(String, Var)> {
        let mut v = self.store.vars_with_prefix("eps.");
        v.extend(self.store.vars_with_prefix("condition."));
        v.extend(
            self.store
                .vars_with_prefix("restorer.")
                .into_iter()
                .filter(|(name, _)| self.cfg.finetune == FinetuneScope::All || name.contains(".modulation.")),
        );
        v
    }

    fn nchw(&self, img: &ImageBatch) -> Result<Tensor> {
        Ok(img.to_nchw()?.to_dtype(self.dtype)?)
    }

    pub fn extract_prior(
        &self,
        mode: PriorMode,
        reference: Option<&ImageBatch>,
        decoded: &ImageBatch,
    ) -> Result<PriorRepresentation> {
        let z = match mode {
            PriorMode::Training => {
                let reference = reference.ok_or(Error::MissingReference)?;
                if !reference.same_shape(decoded) {
                    return Err(Error::DimensionMismatch(format!(
                        "reference {:?} vs decoded {:?}",
                        reference.pixels().dims(),
                        decoded.pixels().dims()
                    )));
                }
                let x = Tensor::cat(&[self.nchw(reference)?, self.nchw(decoded)?], 1)?;
                self.prior.forward(&x)?
            }
            PriorMode::Inference => self.condition.forward(&self.nchw(decoded)?)?,
        };
        PriorRepresentation::new(z, self.cfg.prior_dim())
    }

    /// Runs the reverse chain from `z_T` with the decoded-image condition.
    pub fn denoise(&self, z_t: &Tensor, condition: &PriorRepresentation) -> Result<PriorRepresentation> {
        let z = denoise(z_t, condition.tensor(), &self.schedule, &self.eps)?;
        PriorRepresentation::new(z, self.cfg.prior_dim())
    }

    /// Restorer output before clamping, NCHW.
    fn restore_raw(&self, decoded: &ImageBatch, z: &PriorRepresentation) -> Result<Tensor> {
        if z.dim() != self.cfg.prior_dim() || z.batch() != decoded.batch() {
            return Err(Error::DimensionMismatch(format!(
                "prior {:?} for a batch of {}",
                z.tensor().dims(),
                decoded.batch()
            )));
        }
        self.restorer.forward(&self.nchw(decoded)?, &z.tensor().to_dtype(self.dtype)?)
    }

    pub fn reconstruct(&self, decoded: &ImageBatch, z: &PriorRepresentation) -> Result<ImageBatch> {
        ImageBatch::from_nchw_clamped(&self.restore_raw(decoded, z)?)
    }

    /// Standard normal `z_T` for `batch` images.
    pub fn sample_start(&self, batch: usize, seed: u64) -> Result<Tensor> {
        let dim = self.cfg.prior_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..batch * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Tensor::from_vec(data, (batch, dim), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Inference path: condition on the decoded image, denoise a seeded
    /// Gaussian start and restore.
    pub fn refine(&self, decoded: &ImageBatch, seed: u64) -> Result<ImageBatch> {
        let cond = self.extract_prior(PriorMode::Inference, None, decoded)?;
        let z_t = self.sample_start(decoded.batch(), seed)?;
        let z = self.denoise(&z_t, &cond)?;
        self.reconstruct(decoded, &z)
    }

    /// `ℒ₁` against the unclamped restorer output, so pixels pushed outside
    /// `[0, 1]` still receive a gradient. Never smaller than the clamped loss.
    fn training_l1(&self, reference: &ImageBatch, decoded: &ImageBatch, z: &PriorRepresentation) -> Result<Tensor> {
        let raw = self.restore_raw(decoded, z)?;
        let target = self.nchw(reference)?;
        Ok((target - raw)?.abs()?.mean_all()?)
    }

    /// Stage A: `ℒ₁` of the restorer driven by the prior of the reference pair.
    pub fn stage_a_loss(&self, reference: &ImageBatch, decoded: &ImageBatch) -> Result<Tensor> {
        if !reference.same_shape(decoded) {
            return Err(Error::DimensionMismatch(format!(
                "reference {:?} vs decoded {:?}",
                reference.pixels().dims(),
                decoded.pixels().dims()
            )));
        }
        let z = self.extract_prior(PriorMode::Training, Some(reference), decoded)?;
        self.training_l1(reference, decoded, &z)
    }

    /// Stage B: diffuse the frozen prior to `t = T`, run the reverse chain
    /// conditioned on the decoded image, and score both the recovered prior
    /// (`ℒ₂`) and the restored image (`ℒ₁`).
    pub fn stage_b_loss(&self, reference: &ImageBatch, decoded: &ImageBatch, seed: u64) -> Result<StageBLosses> {
        let z0 = self.extract_prior(PriorMode::Training, Some(reference), decoded)?.detach();
        let noise = self.sample_start(decoded.batch(), seed)?;
        let z_t = self.schedule.forward_diffuse(z0.tensor(), self.schedule.steps(), &noise)?;
        let cond = self.extract_prior(PriorMode::Inference, None, decoded)?;
        let z_hat = self.denoise(&z_t, &cond)?;
        let l2 = loss_l2(&z_hat, &z0)?;
        let l1 = self.training_l1(reference, decoded, &z_hat)?;
        let joint = loss_joint(&l1, &l2)?;
        Ok(StageBLosses { l1, l2, joint })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RefinerConfig {
        RefinerConfig {
            heads: vec![1, 2, 4, 8],
            blocks: vec![1, 1, 1, 1],
            prior_channels: 8,
            base_channels: 8,
            prior_downsamples: 3,
            ..RefinerConfig::default()
        }
    }

    fn images(seed: u64, n: usize, side: usize) -> ImageBatch {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * side * side * 3).map(|_| rng.random::<f32>()).collect();
        ImageBatch::from_vec(data, n, side, side, &Device::Cpu).unwrap()
    }

    #[test]
    fn default_prior_dim() {
        let cfg = RefinerConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.prior_dim(), 384);
    }

    #[test]
    fn config_rejects_mismatched_lists() {
        let cfg = RefinerConfig {
            heads: vec![1, 2, 4],
            ..RefinerConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn training_mode_needs_reference() {
        let r = SemanticRefiner::new(small(), &ParamStore::new(1), DType::F32, &Device::Cpu).unwrap();
        let img = images(0, 1, 16);
        assert!(matches!(
            r.extract_prior(PriorMode::Training, None, &img),
            Err(Error::MissingReference)
        ));
        let other = images(0, 1, 24);
        assert!(r.extract_prior(PriorMode::Training, Some(&other), &img).is_err());
    }

    #[test]
    fn refine_keeps_shape_and_range() {
        let r = SemanticRefiner::new(small(), &ParamStore::new(1), DType::F32, &Device::Cpu).unwrap();
        let img = images(3, 2, 16);
        let out = r.refine(&img, 7).unwrap();
        assert!(out.same_shape(&img));
        let v = out.to_vec_f64().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn prior_size_is_checked() {
        let r = SemanticRefiner::new(small(), &ParamStore::new(1), DType::F32, &Device::Cpu).unwrap();
        let z = Tensor::zeros((1, 31), DType::F32, &Device::Cpu).unwrap();
        assert!(PriorRepresentation::new(z, 32).is_err());
        let nan = Tensor::new(&[[f32::NAN; 4]], &Device::Cpu).unwrap();
        assert!(PriorRepresentation::new(nan, 4).is_err());
        let z = PriorRepresentation::new(Tensor::zeros((2, 32), DType::F32, &Device::Cpu).unwrap(), 32).unwrap();
        assert!(r.reconstruct(&images(0, 1, 16), &z).is_err());
    }

    #[test]
    fn stage_b_vars_respect_scope() {
        let store = ParamStore::new(1);
        let cfg = RefinerConfig {
            finetune: FinetuneScope::Modulation,
            ..small()
        };
        let r = SemanticRefiner::new(cfg, &store, DType::F32, &Device::Cpu).unwrap();
        let names: Vec<String> = r.stage_b_vars().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n.starts_with("eps.")));
        assert!(names
            .iter()
            .filter(|n| n.starts_with("restorer."))
            .all(|n| n.contains(".modulation.")));
        assert!(!names.iter().any(|n| n.starts_with("prior.")));
    }
}
