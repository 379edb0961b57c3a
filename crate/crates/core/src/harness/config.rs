use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelKind;
use crate::classical_baseline::BaselineConfig;
use crate::diffusion_refiner::RefinerConfig;
use crate::error::{Error, Result};
use crate::nn::stable_hash;
use crate::semantic_codec::CodecConfig;

/// Accepts either a single value or a list in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> From<OneOrMany<T>> for Vec<T> {
    fn from(v: OneOrMany<T>) -> Self {
        match v {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(xs) => xs,
        }
    }
}

fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    OneOrMany::<T>::deserialize(d).map(Vec::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Procedurally generated images; needs no files.
    #[default]
    Synthetic,
    /// The CIFAR-10 binary release (`data_batch_*.bin`, `test_batch.bin`).
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Side of synthetic images.
    pub image_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: PathBuf::from("data/cifar-10-batches-bin"),
            train_limit: None,
            test_limit: None,
            image_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    #[serde(rename = "type", deserialize_with = "one_or_many")]
    pub types: Vec<ChannelKind>,
    /// Evaluation SNRs in dB; `inf` means a noise-free link.
    #[serde(deserialize_with = "one_or_many")]
    pub snr_db: Vec<f64>,
    pub mask_density: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            types: vec![ChannelKind::Awgn],
            snr_db: vec![0.0, 3.0, 6.0, 9.0, 12.0, 15.0],
            mask_density: 1.0,
        }
    }
}

/// Codec optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Training SNR is drawn uniformly from this range for every batch.
    pub snr_range: [f64; 2],
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            lr: 1e-4,
            epochs: 5,
            snr_range: [1.0, 13.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sc-cdm")]
    ScCdm,
    #[serde(rename = "nsf")]
    Nsf,
    #[serde(rename = "deepjscc-cnn")]
    DeepJsccCnn,
    #[serde(rename = "jpeg-ldpc-qam")]
    JpegLdpcQam,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ScCdm, Method::Nsf, Method::DeepJsccCnn, Method::JpegLdpcQam];

    pub fn name(self) -> &'static str {
        match self {
            Method::ScCdm => "sc-cdm",
            Method::Nsf => "nsf",
            Method::DeepJsccCnn => "deepjscc-cnn",
            Method::JpegLdpcQam => "jpeg-ldpc-qam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub batch: usize,
    /// SNR of the visual comparison grid.
    pub grid_snr: f64,
    pub grid_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            batch: 50,
            grid_snr: 12.0,
            grid_images: 6,
        }
    }
}

/// Everything one experiment needs, read from a TOML file. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub channel: ChannelConfig,
    pub codec: CodecConfig,
    pub training: TrainingConfig,
    pub refiner: RefinerConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            channel: ChannelConfig::default(),
            codec: CodecConfig::default(),
            training: TrainingConfig::default(),
            refiner: RefinerConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.refiner.validate()?;
        self.baseline.validate()?;
        let snr = &self.channel.snr_db;
        if snr.is_empty() || snr.iter().any(|s| s.is_nan()) {
            return Err(Error::Config("channel.snr_db needs at least one number".into()));
        }
        if snr.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("channel.snr_db must be sorted and unique".into()));
        }
        if self.channel.types.is_empty() {
            return Err(Error::Config("channel.type needs at least one channel".into()));
        }
        let types = &self.channel.types;
        if types.iter().enumerate().any(|(i, t)| types[..i].contains(t)) {
            return Err(Error::Config("channel.type lists a channel twice".into()));
        }
        if !(self.channel.mask_density > 0.0 && self.channel.mask_density <= 1.0) {
            return Err(Error::Config("channel.mask_density must lie in (0, 1]".into()));
        }
        let [lo, hi] = self.training.snr_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("training.snr_range [{lo}, {hi}] is not a finite range")));
        }
        if self.training.batch == 0 || self.refiner.batch == 0 || self.eval.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.training.lr < 0.0 || self.refiner.lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.eval.methods.is_empty() {
            return Err(Error::Config("eval.methods is empty".into()));
        }
        if self.dataset.image_size == 0 || self.dataset.image_size % 8 != 0 {
            return Err(Error::Config("dataset.image_size must be a positive multiple of 8".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Seed of a named random stream, e.g. `seed_for("data")`.
    pub fn seed_for(&self, stream: &str) -> u64 {
        self.seed ^ stable_hash(stream.as_bytes())
    }

    pub fn codec_checkpoint(&self, backbone: crate::semantic_codec::Backbone) -> PathBuf {
        self.out.join(format!("codec-{backbone}.safetensors"))
    }

    pub fn refiner_checkpoint(&self) -> PathBuf {
        self.out.join("refiner.safetensors")
    }
}
