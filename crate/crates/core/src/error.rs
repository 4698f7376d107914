//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum HxError {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: String,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("channel count {channels} not divisible by {n} ({context})")]
    Divisibility {
        channels: usize,
        n: usize,
        context: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, HxError>;
