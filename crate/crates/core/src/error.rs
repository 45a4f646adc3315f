use thiserror::Error;

/// Errors surfaced by the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An input array has the wrong shape for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value violates its documented invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A scalar argument lies outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The dataset directory layout is inconsistent (missing counterparts,
    /// unreadable manifest, ...).
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A checkpoint file is corrupt, truncated or has the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("numerical failure: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
