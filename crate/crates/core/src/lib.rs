pub mod channel;
pub mod classical_baseline;
pub mod diffusion_refiner;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod semantic_codec;

pub use error::{Error, Result};

pub use channel::{ChannelKind, ChannelRealization, ChannelSpec, SymbolVector};
pub use diffusion_refiner::{NoiseSchedule, PriorRepresentation, RefinerConfig, SemanticRefiner};
pub use harness::{ExperimentConfig, Method, RunManifest};
pub use metrics::{CellKey, MetricReport, ResultsTable};
pub use semantic_codec::{Backbone, CodecConfig, ImageBatch, LatentCode, SemanticCodec};
