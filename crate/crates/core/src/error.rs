//! Crate-wide error type.

use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by dataset ingestion, transforms, networks, and metrics.
#[derive(Debug)]
pub enum Error {
    /// A file did not match the expected binary layout.
    Format(String),
    /// A record inside an otherwise well-formed file is invalid.
    CorruptRecord(String),
    /// Invalid configuration (shapes, levels, ranges).
    Config(String),
    /// Array shapes do not compose.
    Shape(String),
    /// A metric is undefined for the given batch (e.g. single-class ROC).
    UndefinedMetric(String),
    /// Training diverged or received unusable data.
    Training(String),
    /// Underlying I/O failure.
    Io(io::Error),
    /// Serialization failure (checkpoints, manifests).
    Serde(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::CorruptRecord(msg) => write!(f, "corrupt record: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
            Error::Training(msg) => write!(f, "training error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Serde(msg) => write!(f, "serialization error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serde(err.to_string())
    }
}
