//! Experiment orchestration. Each command reads an [`ExperimentConfig`],
//! writes its outputs under `out`, and leaves a [`RunManifest`] next to them.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod manifest;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use candle_core::Device;
use log::info;
use serde::Serialize;

pub use self::checkpoint::{Checkpoint, CheckpointKind, TrainState};
pub use self::config::{ExperimentConfig, Method};
pub use self::dataset::{Dataset, Split};
pub use self::eval::{evaluate, BaselineCell, EvalOutput, Models};
pub use self::manifest::RunManifest;
pub use self::train::{CodecRun, RefinerRun};

use self::eval::{comparison_grid, EVAL_DTYPE};
use self::manifest::sha256_file;
use self::report::{plot_metric_vs_snr, save_grid, GridIndex, GridIndexRow};
use self::train::{load_codec, load_refiner};
use crate::classical_baseline::ClassicalBaseline;
use crate::error::{Error, Result};
use crate::metrics::ResultsTable;
use crate::semantic_codec::Backbone;

pub const RESULTS_CSV: &str = "results.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const BASELINE_CSV: &str = "baseline.csv";
pub const BASELINE_FRAMES_CSV: &str = "baseline_frames.csv";
pub const GRID_PNG: &str = "grid.png";
pub const GRID_JSON: &str = "grid.json";
pub const CONFIG_COPY: &str = "config.toml";

const NOTE_CODEC_PATH: &str = "codec_checkpoint";
const NOTE_CODEC_SHA: &str = "codec_sha256";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Caps the number of images read from whichever split a command uses.
    pub limit: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Reads `path` (or the defaults when `None`) and applies `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.out = out.clone();
    }
    if let Some(limit) = overrides.limit {
        if limit == 0 {
            return Err(Error::Config("--limit must be positive".into()));
        }
        cfg.dataset.train_limit = Some(limit);
        cfg.dataset.test_limit = Some(limit);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: PathBuf,
    pub state: Option<TrainState>,
    pub table: Option<ResultsTable>,
    pub baseline: Vec<BaselineCell>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn new(manifest: PathBuf, warnings: Vec<String>) -> Self {
        Self {
            manifest,
            state: None,
            table: None,
            baseline: Vec::new(),
            warnings,
        }
    }
}

fn begin(command: &str, exp: &ExperimentConfig) -> Result<RunManifest> {
    std::fs::create_dir_all(&exp.out).map_err(|e| Error::io(&exp.out, e))?;
    let path = exp.out.join(format!("{command}.{CONFIG_COPY}"));
    std::fs::write(&path, exp.to_toml()?).map_err(|e| Error::io(&path, e))?;
    let mut manifest = RunManifest::start(command, exp);
    manifest.add_artifact(&exp.out, &path)?;
    info!("{command}: config {} -> {}", manifest.config_hash, exp.out.display());
    Ok(manifest)
}

fn finish(manifest: RunManifest, exp: &ExperimentConfig) -> Result<Outcome> {
    let warnings = manifest.warnings.clone();
    let path = manifest.finish(&exp.out)?;
    Ok(Outcome::new(path, warnings))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingCheckpoint {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        })
    }
}

/// Trains a codec and saves it as `codec-<backbone>.safetensors`. With
/// `resume`, continues from that file up to `training.epochs`.
pub fn train_codec(exp: &ExperimentConfig, backbone: Option<Backbone>, resume: bool) -> Result<Outcome> {
    let mut cfg = exp.codec.clone();
    if let Some(b) = backbone {
        cfg.backbone = b;
    }
    let command = format!("train-codec-{}", cfg.backbone);
    let mut manifest = begin(&command, exp)?;
    let device = Device::Cpu;
    let path = exp.codec_checkpoint(cfg.backbone);
    let mut run = if resume {
        require(&path, "nothing to resume; run train-codec without --resume first")?;
        CodecRun::resume(exp, &Checkpoint::load(&path, CheckpointKind::Codec, &device)?, &device)?
    } else {
        CodecRun::new(exp, &cfg, &device)?
    };
    let data = Dataset::load(&exp.dataset, Split::Train, None)?;
    info!("training {} codec on {} images", cfg.backbone, data.len());
    run.train(exp, &data, exp.training.epochs)?;
    run.checkpoint()?.save(&path)?;
    manifest.add_artifact(&exp.out, &path)?;
    manifest.losses = run.state.losses.clone();
    let mut outcome = finish(manifest, exp)?;
    outcome.state = Some(run.state);
    Ok(outcome)
}

/// Trains the refiner on top of the saved swin codec.
pub fn train_refiner(exp: &ExperimentConfig, stage_a_only: bool) -> Result<Outcome> {
    let mut manifest = begin("train-refiner", exp)?;
    let device = Device::Cpu;
    let codec_path = exp.codec_checkpoint(Backbone::Swin);
    require(&codec_path, "run train-codec first")?;
    let codec = load_codec(
        &Checkpoint::load(&codec_path, CheckpointKind::Codec, &device)?,
        train::TRAIN_DTYPE,
        &device,
    )?;
    let data = Dataset::load(&exp.dataset, Split::Train, None)?;
    let mut run = RefinerRun::new(exp, &device)?;
    run.train(exp, &codec, &data, stage_a_only)?;
    run.state
        .notes
        .insert(NOTE_CODEC_PATH.into(), codec_path.display().to_string());
    run.state.notes.insert(NOTE_CODEC_SHA.into(), sha256_file(&codec_path)?.0);
    let path = exp.refiner_checkpoint();
    run.checkpoint()?.save(&path)?;
    manifest.add_artifact(&exp.out, &path)?;
    manifest.losses = run.state.losses.clone();
    let mut outcome = finish(manifest, exp)?;
    outcome.state = Some(run.state);
    Ok(outcome)
}

/// Loads what `methods` need. Absent checkpoints become warnings.
pub fn load_models(exp: &ExperimentConfig, methods: &[Method], manifest: &mut RunManifest) -> Result<Models> {
    let device = Device::Cpu;
    let mut models = Models::default();
    let wants = |m: &[Method]| methods.iter().any(|x| m.contains(x));
    let try_codec = |b: Backbone, manifest: &mut RunManifest| -> Result<Option<_>> {
        let path = exp.codec_checkpoint(b);
        if !path.exists() {
            manifest.warn(format!("no {b} codec checkpoint at {}", path.display()));
            return Ok(None);
        }
        let ck = Checkpoint::load(&path, CheckpointKind::Codec, &device)?;
        let codec = load_codec(&ck, EVAL_DTYPE, &device)?;
        if codec.backbone() != b {
            return Err(Error::Checkpoint {
                path,
                detail: format!("holds a {} codec", codec.backbone()),
            });
        }
        Ok(Some(codec))
    };
    if wants(&[Method::Nsf, Method::ScCdm]) {
        models.swin = try_codec(Backbone::Swin, manifest)?;
    }
    if wants(&[Method::DeepJsccCnn]) {
        models.cnn = try_codec(Backbone::Cnn, manifest)?;
    }
    if wants(&[Method::ScCdm]) {
        let path = exp.refiner_checkpoint();
        if path.exists() {
            let ck = Checkpoint::load(&path, CheckpointKind::Refiner, &device)?;
            check_refiner_codec(&ck, exp, manifest)?;
            models.refiner = Some(load_refiner(&ck, EVAL_DTYPE, &device)?);
        } else {
            manifest.warn(format!("no refiner checkpoint at {}", path.display()));
        }
    }
    if wants(&[Method::JpegLdpcQam]) {
        models.baseline = Some(ClassicalBaseline::new(exp.baseline)?);
    }
    Ok(models)
}

/// Warns when the refiner was trained on a different codec file than the one
/// now on disk.
fn check_refiner_codec(ck: &Checkpoint, exp: &ExperimentConfig, manifest: &mut RunManifest) -> Result<()> {
    let codec_path = exp.codec_checkpoint(Backbone::Swin);
    if let (Some(recorded), true) = (ck.state.notes.get(NOTE_CODEC_SHA), codec_path.exists()) {
        if *recorded != sha256_file(&codec_path)?.0 {
            manifest.warn(format!(
                "refiner was trained on a different codec than {}",
                codec_path.display()
            ));
        }
    }
    Ok(())
}

fn plot_all(table: &ResultsTable, exp: &ExperimentConfig, manifest: &mut RunManifest) -> Result<()> {
    let mut channels: Vec<&str> = table.rows.iter().map(|r| r.channel.as_str()).collect();
    channels.sort_unstable();
    channels.dedup();
    for ch in channels {
        let path = exp.out.join(format!("psnr_vs_snr_{ch}.svg"));
        plot_metric_vs_snr(table, ch, "psnr", &path)?;
        manifest.add_artifact(&exp.out, &path)?;
    }
    Ok(())
}

fn record_skips(out: &EvalOutput, manifest: &mut RunManifest) {
    for (_, msg) in &out.skipped {
        manifest.warn(msg.clone());
    }
}

/// Full evaluation: `results.csv`, one PSNR plot per channel and the
/// comparison grid at `eval.grid_snr` on the first channel.
pub fn eval(exp: &ExperimentConfig) -> Result<Outcome> {
    let mut manifest = begin("eval", exp)?;
    let methods = exp.eval.methods.clone();
    let models = load_models(exp, &methods, &mut manifest)?;
    let data = Dataset::load(&exp.dataset, Split::Test, None)?;
    let out = evaluate(exp, &models, &data, &methods)?;
    record_skips(&out, &mut manifest);
    let csv = exp.out.join(RESULTS_CSV);
    out.table.save_csv(&csv)?;
    manifest.add_artifact(&exp.out, &csv)?;
    plot_all(&out.table, exp, &mut manifest)?;

    let channel = exp.channel.types[0];
    let rows = comparison_grid(exp, &models, &data, &methods, channel, exp.eval.grid_snr)?;
    if rows.len() > 1 {
        let png = exp.out.join(GRID_PNG);
        save_grid(&rows, &png)?;
        manifest.add_artifact(&exp.out, &png)?;
        let index = GridIndex {
            snr_db: exp.eval.grid_snr,
            channel: channel.to_string(),
            rows: rows
                .iter()
                .map(|r| GridIndexRow {
                    label: r.label.clone(),
                    psnr: r.psnr.clone(),
                    gain_percent: r.gain_percent.clone(),
                })
                .collect(),
        };
        let json = exp.out.join(GRID_JSON);
        std::fs::write(&json, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&json, e))?;
        manifest.add_artifact(&exp.out, &json)?;
    } else {
        manifest.warn("no method could run; grid not written");
    }
    let mut outcome = finish(manifest, exp)?;
    outcome.table = Some(out.table);
    outcome.baseline = out.baseline;
    Ok(outcome)
}

/// sc-cdm against nsf. Both rows come from one swin codec checkpoint and one
/// channel draw per cell, so the refiner is the only difference.
pub fn ablate(exp: &ExperimentConfig) -> Result<Outcome> {
    let mut manifest = begin("ablate", exp)?;
    let methods = [Method::ScCdm, Method::Nsf];
    require(&exp.codec_checkpoint(Backbone::Swin), "ablation needs the swin codec; run train-codec")?;
    require(&exp.refiner_checkpoint(), "ablation needs the refiner; run train-refiner")?;
    let models = load_models(exp, &methods, &mut manifest)?;
    let data = Dataset::load(&exp.dataset, Split::Test, None)?;
    let out = evaluate(exp, &models, &data, &methods)?;
    let csv = exp.out.join(ABLATION_CSV);
    out.table.save_csv(&csv)?;
    manifest.add_artifact(&exp.out, &csv)?;
    manifest.add_artifact(&exp.out, &exp.codec_checkpoint(Backbone::Swin))?;
    manifest.add_artifact(&exp.out, &exp.refiner_checkpoint())?;
    let mut outcome = finish(manifest, exp)?;
    outcome.table = Some(out.table);
    Ok(outcome)
}

#[derive(Serialize)]
struct FrameRow<'a> {
    channel: &'a str,
    snr_db: f64,
    images: usize,
    ok_rate: f64,
    frame_error_rate: f64,
    bandwidth_ratio: f64,
}

/// The separated JPEG + LDPC + QAM scheme alone, with per-cell decoding
/// statistics in `baseline_frames.csv`.
pub fn baseline(exp: &ExperimentConfig) -> Result<Outcome> {
    let mut manifest = begin("baseline", exp)?;
    let methods = [Method::JpegLdpcQam];
    let models = load_models(exp, &methods, &mut manifest)?;
    let data = Dataset::load(&exp.dataset, Split::Test, None)?;
    let out = evaluate(exp, &models, &data, &methods)?;
    let csv = exp.out.join(BASELINE_CSV);
    out.table.save_csv(&csv)?;
    manifest.add_artifact(&exp.out, &csv)?;

    let frames = exp.out.join(BASELINE_FRAMES_CSV);
    let mut w = csv::Writer::from_path(&frames)?;
    for c in &out.baseline {
        w.serialize(FrameRow {
            channel: &c.channel,
            snr_db: c.snr_db,
            images: c.images,
            ok_rate: c.ok_rate(),
            frame_error_rate: c.frame_error_rate(),
            bandwidth_ratio: c.bandwidth_ratio(data.side()),
        })?;
    }
    w.flush().map_err(|e| Error::io(&frames, e))?;
    drop(w);
    manifest.add_artifact(&exp.out, &frames)?;
    let mut outcome = finish(manifest, exp)?;
    outcome.table = Some(out.table);
    outcome.baseline = out.baseline;
    Ok(outcome)
}

/// Redraws the per-channel plots from an existing `results.csv`.
pub fn plot(exp: &ExperimentConfig) -> Result<Outcome> {
    let mut manifest = begin("plot", exp)?;
    let table = ResultsTable::load_csv(&exp.out.join(RESULTS_CSV))?;
    plot_all(&table, exp, &mut manifest)?;
    let mut outcome = finish(manifest, exp)?;
    outcome.table = Some(table);
    Ok(outcome)
}
