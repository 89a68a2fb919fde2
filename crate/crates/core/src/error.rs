use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Captions {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing captions for sample `{0}`")]
    MissingCaption(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dataset {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in parameter `{name}` ({count} bad entries)")]
    NonFiniteGradient { name: String, count: usize },

    #[error("captioner request failed after {attempts} attempt(s): {message}")]
    CaptionerRetriable { attempts: u32, message: String },

    #[error("captioner returned HTTP {status}: {body}")]
    CaptionerStatus { status: u16, body: String },

    #[error("captioner response: {0}")]
    CaptionerResponse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for transport-level captioner failures that may succeed on retry.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::CaptionerRetriable { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
