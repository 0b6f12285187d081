use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by the library.
///
/// `Config` covers caller mistakes (bad dimensions, bad hyperparameters,
/// mismatched shapes), `Format` covers malformed data or model files, and
/// `Training` covers numerical failures detected mid-run (NaN loss or
/// gradients). I/O errors keep the offending path when one is known.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code convention: 1 for user-correctable errors,
    /// 2 for internal/numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Io { .. } => 1,
            Error::Training(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
