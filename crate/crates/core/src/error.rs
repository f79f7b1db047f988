use std::path::PathBuf;

use numcore::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{what} must be divisible by {divisor}, got {value}")]
    Divisibility {
        what: &'static str,
        value: usize,
        divisor: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("mask generation failed: {0}")]
    MaskGeneration(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("dataset: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a checkpoint. Each corruption mode has its own
/// variant so callers can tell them apart.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: file is corrupted")]
    ChecksumMismatch,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint holds a {found} model where a {expected} model is required")]
    StageMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
