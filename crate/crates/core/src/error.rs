use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Data that violates a domain invariant (non-finite pixels, undersized sources).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A caller-supplied parameter outside its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset problems detected before any work starts (unreadable manifest, missing files).
    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss {loss} at step {step} (batch samples: {})", .batch.join(", "))]
    NonFiniteLoss { step: usize, loss: f64, batch: Vec<String> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding a serialized weight file (model checkpoint or feature extractor).
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unrecognized file format or version: {0}")]
    Version(String),

    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed header: {0}")]
    Header(String),
}

macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

macro_rules! invalid_input {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidInput(format!($($arg)*))
    };
}

pub(crate) use invalid_arg;
pub(crate) use invalid_input;
