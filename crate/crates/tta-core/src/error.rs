//! Error type shared by every layer of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TtaError>;

#[derive(Debug, Error)]
pub enum TtaError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// NaN or Inf escaped a numeric kernel; the computation is unusable.
    #[error("{op}: non-finite value produced{context}")]
    NonFinite { op: &'static str, context: String },

    #[error("{op}: input is not a probability vector (sum = {sum:.12}, min = {min:.3e})")]
    NotNormalized { op: &'static str, sum: f64, min: f64 },

    #[error("backward root must be scalar, got {len} elements")]
    NotScalar { len: usize },

    #[error("layout mismatch: {what}")]
    LayoutMismatch { what: String },

    #[error("empty input: {what}")]
    EmptyInput { what: &'static str },

    #[error("invalid argument: {what}")]
    InvalidArg { what: String },

    #[error("serialization failed: {0}")]
    Serde(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TtaError {
    pub fn invalid(what: impl Into<String>) -> Self {
        TtaError::InvalidArg { what: what.into() }
    }
}

impl From<serde_json::Error> for TtaError {
    fn from(e: serde_json::Error) -> Self {
        TtaError::Serde(e.to_string())
    }
}
