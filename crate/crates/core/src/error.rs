use std::path::PathBuf;

use thiserror::Error;

use crate::partition::RegionId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("numerical failure in region {region}: {msg}")]
    Numerical { region: RegionId, msg: String },

    /// Numerical failure outside the region tree, such as a likelihood fit.
    #[error("numerical failure: {0}")]
    Fit(String),

    #[error("matrix is not positive definite after jitter escalation ({context})")]
    NotPositiveDefinite { context: String },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("timed out waiting for messages: {missing:?}")]
    Timeout { missing: Vec<(RegionId, usize)> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
