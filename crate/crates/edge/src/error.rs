use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the pipeline.
#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("failed to load {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("requested {requested} images but the attribute vocabulary only yields {capacity} combinations")]
    Capacity { requested: usize, capacity: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite loss at step {step} (batch image ids: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("captioner transport error after {retries} retries: {message}")]
    Transport { retries: usize, message: String },

    #[error("caption expansion failed for image {image_id}: {message}")]
    Expansion { image_id: String, message: String },
}

pub type Result<T> = std::result::Result<T, EdgeError>;
