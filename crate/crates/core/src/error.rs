use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("region is empty: {0}")]
    EmptyRegion(&'static str),

    #[error("cannot sample a non-shadow region: the image has no shadow-free pixels")]
    NoShadowFreePixels,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("no mask found for image stem(s): {}", .0.join(", "))]
    MissingMask(Vec<String>),

    #[error("training diverged: {term} became non-finite ({value})")]
    Diverged { term: &'static str, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
