use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown backbone `{0}` (expected `swin` or `cnn`)")]
    UnknownBackbone(String),

    #[error("cannot normalize a zero-power signal")]
    ZeroPower,

    #[error("time step {t} outside 1..={max}")]
    TimeStep { t: usize, max: usize },

    #[error("training mode requires a reference image")]
    MissingReference,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("missing checkpoint {}: {hint}", path.display())]
    MissingCheckpoint { path: PathBuf, hint: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error in {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("plot error: {0}")]
    Plot(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
