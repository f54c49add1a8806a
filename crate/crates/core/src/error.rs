use std::path::PathBuf;

use thiserror::Error;

use crate::annotations::AnnotationError;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Annotation(#[from] AnnotationError),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("audio decode failed for {path}: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),

    #[error("zero-length audio: {0}")]
    EmptyAudio(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at epoch {epoch} on piece {piece}: {detail}")]
    Divergence {
        epoch: usize,
        piece: String,
        detail: String,
    },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("data leakage: {0}")]
    Leakage(String),
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
