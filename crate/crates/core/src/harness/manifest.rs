use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory when inside it.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one command run: what was asked, what it produced and how long
/// it took.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub revision: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_secs: f64,
    pub losses: BTreeMap<String, Vec<f64>>,
    pub warnings: Vec<String>,
    pub artifacts: Vec<Artifact>,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// `git rev-parse HEAD` of the working directory, or `unknown`.
pub fn source_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| format!("unknown (crate {})", env!("CARGO_PKG_VERSION")))
}

/// Named random streams every command may draw from.
pub const SEED_STREAMS: [&str; 10] = [
    "init",
    "codec.order",
    "codec.channel",
    "refiner.init",
    "refiner.a.order",
    "refiner.a.channel",
    "refiner.b.order",
    "refiner.b.channel",
    "eval",
    "baseline",
];

impl RunManifest {
    pub fn start(command: &str, exp: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: exp.hash(),
            revision: source_revision(),
            seed: exp.seed,
            seeds: SEED_STREAMS.iter().map(|s| (s.to_string(), exp.seed_for(s))).collect(),
            wall_clock_secs: 0.0,
            losses: BTreeMap::new(),
            warnings: Vec::new(),
            artifacts: Vec::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Hashes `path` and lists it, relative to `root` when possible.
    pub fn add_artifact(&mut self, root: &Path, path: &Path) -> Result<()> {
        let (sha256, bytes) = sha256_file(path)?;
        let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel,
            sha256,
            bytes,
        });
        Ok(())
    }

    /// Writes `manifest-<command>.json` into `dir` and returns its path.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        if let Some(t) = self.started {
            self.wall_clock_secs = t.elapsed().as_secs_f64();
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Re-hashes every listed artifact and reports the ones that changed.
    pub fn verify(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut changed = Vec::new();
        for a in &self.artifacts {
            let p = root.join(&a.path);
            let ok = sha256_file(&p).map(|(h, _)| h == a.sha256).unwrap_or(false);
            if !ok {
                changed.push(a.path.clone());
            }
        }
        Ok(changed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
