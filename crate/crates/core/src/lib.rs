//! Temporal user profiling for content-based recommendation: profile
//! generation, embedding, attention fusion, training and evaluation.

pub mod backend;
pub mod baselines;
pub mod cache;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod profiler;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Result, TupError};
pub use datamodel::{Embedding, Horizon, Interaction, ItemCatalog, ItemRecord, SplitDataset, UserHistory, UserSplit};
pub use encoder::EmbeddingTable;
pub use eval::{Metric, MetricsReport};
pub use model::{ModelConfig, ModelParams, UserRepr, VariantKind};
pub use pipeline::{ExperimentOutcome, PipelineConfig};
pub use profiler::ProfileText;
pub use synth::SynthConfig;
pub use trainer::{TrainConfig, TrainHistory};
