//! Checkpoint archives: a safetensors file whose header metadata carries the
//! schema version, the archive kind, the model config and the training state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Codec,
    Refiner,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Codec => "codec",
            CheckpointKind::Refiner => "refiner",
        }
    }
}

/// Training progress saved with the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed so far (summed over stages for the refiner).
    pub epochs_done: usize,
    pub optimizer_steps: usize,
    /// Named per-epoch loss curves.
    pub losses: BTreeMap<String, Vec<f64>>,
    /// Free-form facts, e.g. the codec checkpoint a refiner was trained on.
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// JSON of the model config.
    pub config: String,
    pub state: TrainState,
    pub params: BTreeMap<String, Tensor>,
    /// Optimizer moments keyed `adam.m.<name>` / `adam.v.<name>`.
    pub optimizer: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn from_view(view: &TensorView<'_>, device: &Device) -> std::result::Result<Tensor, String> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)
        }
        other => return Err(format!("unsupported tensor dtype {other:?}")),
    };
    t.map_err(|e| e.to_string())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let err = |detail: String| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let mut buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in &self.params {
            let (dt, bytes) = to_bytes(t)?;
            buffers.push((format!("{PARAM_PREFIX}{name}"), dt, t.dims().to_vec(), bytes));
        }
        for (name, t) in &self.optimizer {
            let (dt, bytes) = to_bytes(t)?;
            buffers.push((name.clone(), dt, t.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(name, dt, shape, bytes)| {
                TensorView::new(*dt, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| err(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("schema_version".to_string(), SCHEMA_VERSION.to_string());
        meta.insert("kind".to_string(), self.kind.as_str().to_string());
        meta.insert("config".to_string(), self.config.clone());
        meta.insert("state".to_string(), serde_json::to_string(&self.state)?);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks the archive kind and schema version.
    pub fn load(path: &Path, expected: CheckpointKind, device: &Device) -> Result<Self> {
        let err = |detail: String| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| err(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| err(format!("metadata lacks `{k}`")));
        let version = field("schema_version")?;
        if version != SCHEMA_VERSION.to_string() {
            return Err(err(format!("schema_version {version}, expected {SCHEMA_VERSION}")));
        }
        let kind = field("kind")?;
        if kind != expected.as_str() {
            return Err(err(format!("holds a {kind} checkpoint, expected {}", expected.as_str())));
        }
        let state: TrainState = serde_json::from_str(&field("state")?)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| err(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, view) in st.iter() {
            let t = from_view(&view, device).map_err(|e| err(format!("tensor `{name}`: {e}")))?;
            match name.strip_prefix(PARAM_PREFIX) {
                Some(p) => params.insert(p.to_string(), t),
                None => optimizer.insert(name.to_string(), t),
            };
        }
        Ok(Self {
            kind: expected,
            config: field("config")?,
            state,
            params,
            optimizer,
        })
    }

    pub fn params_map(&self) -> HashMap<String, Tensor> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn optimizer_map(&self) -> HashMap<String, Tensor> {
        self.optimizer.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}
