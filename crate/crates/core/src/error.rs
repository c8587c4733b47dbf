//! Error types shared across the toolkit.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SbsgError>;

/// Errors emitted by tensor ops, model assembly, data handling, and I/O.
#[derive(Debug)]
pub enum SbsgError {
    /// Shapes or axes do not line up.
    Dimension(String),
    /// A documented precondition was violated.
    Contract(String),
    /// A configuration value is out of its valid range.
    Config(String),
    /// A token id falls outside the vocabulary.
    Vocab(String),
    /// Malformed user-supplied data.
    Input(String),
    /// I/O failure, with the path that triggered it.
    Io { path: PathBuf, source: std::io::Error },
    /// A checkpoint file is missing, truncated, or from another build.
    Checkpoint(String),
    /// The wall-clock benchmark could not produce a measurement.
    Bench(String),
}

impl fmt::Display for SbsgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SbsgError::Dimension(msg) => write!(f, "dimension error: {msg}"),
            SbsgError::Contract(msg) => write!(f, "contract violation: {msg}"),
            SbsgError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            SbsgError::Vocab(msg) => write!(f, "vocabulary error: {msg}"),
            SbsgError::Input(msg) => write!(f, "input error: {msg}"),
            SbsgError::Io { path, source } => {
                write!(f, "I/O error at {}: {source}", path.display())
            }
            SbsgError::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            SbsgError::Bench(msg) => write!(f, "benchmark error: {msg}"),
        }
    }
}

impl std::error::Error for SbsgError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SbsgError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl SbsgError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SbsgError::Io { path: path.into(), source }
    }
}
