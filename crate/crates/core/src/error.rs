//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A dataset record violated an invariant; carries the record id.
    #[error("malformed record {id}: {reason}")]
    MalformedRecord { id: String, reason: String },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("tokenize error: {0}")]
    Tokenize(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("pairs error: {0}")]
    Pairs(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("training error: {0}")]
    Train(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
