//! Online test-time adaptation over a compact differentiable classifier.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors and a per-batch reverse-mode
//!   autodiff tape restricted to the ops the pipeline needs.
//! - [`network`]: a residual MLP classifier with batch- or layer-norm whose
//!   normalization affine parameters are the only adaptable weights, plus
//!   stochastic-depth sub-network sampling and checkpoint I/O.
//! - [`selection`]: entropy- and diversity-based active sample scoring with
//!   a moving-average prediction tracker.
//! - [`fisher`]: diagonal Fisher importance from pseudo-labeled samples and
//!   the quadratic anchoring regularizer.
//! - [`engine`]: the online adaptation loop (entropy and consistency
//!   objectives, scenario resets, pass accounting).
//! - [`metrics`]: accuracy, expected calibration error, forgetting probes,
//!   disagreement audits, and the serializable run report.

pub mod engine;
pub mod error;
pub mod fisher;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod selection;
pub mod tape;
pub mod tensor;

pub use engine::{AdaptConfig, AdaptEngine, BatchOutcome, Method, ProbeSpec, Scenario, StreamBatch};
pub use error::{Result, TtaError};
pub use fisher::{estimate_fisher, regularizer_value, FisherMap};
pub use metrics::{
    disagreement_audit, ece, forgetting_probe, EceAccumulator, RunReport, DEFAULT_ECE_BINS,
};
pub use network::{ArchConfig, Model, NormMode, ParamKey, StatsMode, SubNetworkMask, TrackSet};
pub use optim::SgdMomentum;
pub use selection::{
    combined_score_eata, combined_score_eatac, diversity_weight, entropy_weight,
    update_moving_average, SelectionConfig, SelectionState,
};
pub use tape::{Grads, NodeId, NormStats, Tape};
pub use tensor::{softmax_rows, Tensor};
