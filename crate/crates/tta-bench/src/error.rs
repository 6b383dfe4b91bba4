//! Harness error type with process exit-code mapping.

use thiserror::Error;
use tta_core::TtaError;

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] TtaError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl BenchError {
    pub fn config(msg: impl Into<String>) -> Self {
        BenchError::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        BenchError::Invariant(msg.into())
    }

    /// 0 success, 2 config error, 3 invariant violation, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Invariant(_) => 3,
            BenchError::Numeric(_) => 4,
            BenchError::Core(TtaError::NonFinite { .. }) => 4,
            BenchError::Core(_) => 3,
            BenchError::Io(_) => 1,
        }
    }
}
