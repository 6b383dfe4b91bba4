//! Desk-scale benchmark harness for online test-time adaptation: synthetic
//! Gaussian-mixture data with parametric corruptions, source-model
//! training, scenario orchestration over the adaptation engine, and
//! report persistence/aggregation.

pub mod config;
pub mod corrupt;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod report;
pub mod train;

pub use config::{FileConfig, RuntimeConfig};
pub use corrupt::{CorruptionKind, CorruptionSpec};
pub use dataset::{generate_dataset, DatasetBundle, DatasetSpec, Split};
pub use error::{BenchError, Result};
pub use experiment::{
    build_stream, prepare_artifacts, run_adaptation, run_experiment, Artifacts,
};
pub use train::{evaluate, train_source, TrainSettings};
