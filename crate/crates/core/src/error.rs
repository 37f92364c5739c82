use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the imaging chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {what} = {index}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("ray endpoint ({x:.6e}, {z:.6e}) m lies outside the reconstruction grid")]
    OutsideGrid { x: f64, z: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("path matrix assembly needs about {estimated_bytes} bytes, budget is {budget_bytes}")]
    MemoryBudget {
        estimated_bytes: u64,
        budget_bytes: u64,
    },

    #[error("sampling window too short: {available} samples recorded, {required} required")]
    SamplingWindow { available: usize, required: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("receive angle {required_deg:.2} deg exceeds acceptance limit {limit_deg:.2} deg")]
    ApertureRejected { required_deg: f64, limit_deg: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Coarse category used by the command line driver to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::ApertureRejected { .. } | Error::IndexOutOfRange { .. } => {
                ErrorKind::Config
            }
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
            _ => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numerical,
}
