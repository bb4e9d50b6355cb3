use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KcodError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KcodError {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("empty objective: {0}")]
    EmptyObjective(String),

    #[error("stale activation cache: cache was produced by parameter version {cached}, model is at {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KcodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KcodError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 usage/validation, 3 data, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            KcodError::Parameter(_) => 2,
            KcodError::Divergence(_) | KcodError::OracleFailure(_) => 4,
            _ => 3,
        }
    }
}
