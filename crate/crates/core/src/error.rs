use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the light-field synthesis library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// Angular grids must have odd extents so that a center view exists.
    #[error("angular grid must be odd-sized, got {0}x{1}")]
    EvenGrid(usize, usize),
    /// An index (row, column, angular offset) lies outside its container.
    #[error("{what} index {index} out of range (extent {extent})")]
    OutOfRange {
        what: &'static str,
        index: i64,
        extent: usize,
    },
    /// A file that the caller expected to exist is missing.
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    /// Underlying I/O failure.
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed PFM, .flo, grid PNG, manifest or CSV content.
    #[error("format error: {0}")]
    Format(String),
    /// PNG encode/decode failure.
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    /// A depth or flow provider could not satisfy a request.
    #[error("provider error: {0}")]
    Provider(String),
    /// An optimizer produced a non-finite loss.
    #[error("loss diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    /// Checkpoint could not be read, written or does not match the config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Bad key or value in a config file.
    #[error("config error: {0}")]
    Config(String),
    /// An experiment row needs an artifact that was not supplied.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
