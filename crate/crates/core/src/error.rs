//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid activation matrix: {0}")]
    InvalidMatrix(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("non-finite value in {context}")]
    Numeric { context: String },

    #[error("operation not supported by the {backend} backend: {what}")]
    UnsupportedBackend { backend: &'static str, what: String },

    #[error("infeasible epsilon: {0}")]
    InfeasibleEpsilon(String),

    #[error("empty Pareto front: {0}")]
    EmptyFront(String),

    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),

    #[error("internal inconsistency: {0}")]
    Internal(String),

    #[error("protocol violation in round {round}: {detail}")]
    ProtocolViolation { round: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InfeasibleEpsilon(_) | Error::EmptyFront(_) => 2,
            Error::ProtocolViolation { .. } => 3,
            Error::UnsupportedBackend { .. } => 4,
            _ => 1,
        }
    }
}

/// Fails with [`Error::Numeric`] when `value` is NaN or infinite.
pub(crate) fn ensure_finite(value: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric { context: context() })
    }
}
