use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate 2D covariance (det = {det:e})")]
    DegenerateCovariance { det: f64 },

    #[error("degenerate relocation: non-positive normaliser {value:e} for o = {opacity}, N = {count}")]
    DegenerateRelocation {
        opacity: f64,
        count: usize,
        value: f64,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
