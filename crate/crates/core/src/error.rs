use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the optimization framework.
#[derive(Debug, Error)]
pub enum EsgdError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stale fitness: individual {id} has no valid cached fitness")]
    StaleFitness { id: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("divergent gradient: non-finite entry in stochastic gradient")]
    DivergentGradient,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parse error in {source_name} at row {row}, column {column}: {message}")]
    Parse {
        source_name: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("malformed metrics record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invariant violated: {0}")]
    InvariantViolated(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl EsgdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        EsgdError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input (bad config, bad data files).
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            EsgdError::Config(_) | EsgdError::Parse { .. } | EsgdError::DimensionMismatch { .. }
        )
    }
}

pub type Result<T, E = EsgdError> = std::result::Result<T, E>;
