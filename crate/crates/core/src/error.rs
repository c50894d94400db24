use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("invalid volume: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("lesion placement failed: {0}")]
    Placement(String),

    #[error("patch sampling failed: {0}")]
    Sampling(String),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("actnorm initialization failed: {0}")]
    Init(String),

    #[error("numeric error at step {step}: {what}")]
    Numeric { step: u64, what: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
