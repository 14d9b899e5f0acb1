use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("degenerate latent: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
