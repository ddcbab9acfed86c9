use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    Missing(PathBuf),

    /// Text-format error naming the offending record (0-based, header excluded).
    #[error("parse error in {path} at record {record}: {msg}")]
    Parse {
        path: String,
        record: usize,
        msg: String,
    },

    /// Binary-format error with the byte offset where decoding failed.
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: usize, term: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(path: &std::path::Path, record: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            record,
            msg: msg.into(),
        }
    }
}
