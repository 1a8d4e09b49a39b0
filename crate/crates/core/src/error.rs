use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("query is not on the table grid: {0}")]
    GridMiss(String),

    #[error("simulated-time budget exhausted")]
    BudgetExhausted,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("job cap exceeded: {jobs} course runs requested, cap is {cap}")]
    CapExceeded { jobs: usize, cap: usize },

    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),

    #[error("too few rows: need at least {needed}, got {got}")]
    TooFewRows { needed: usize, got: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
