use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("patch at ({row}, {col}) with size {height}x{width} exceeds background {bg_height}x{bg_width}")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
        bg_height: usize,
        bg_width: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    /// The negative sample has no class region large enough; pick another sample.
    #[error("no usable class region in negative sample {0}")]
    NoUsableRegion(String),

    /// The patch does not fit in the band below the horizon; shrink it and retry.
    #[error("patch of height {patch_height} does not fit below horizon row {horizon_row} of image height {image_height}; rescale patch")]
    RescalePatch {
        patch_height: usize,
        image_height: usize,
        horizon_row: usize,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: label id {id} at (row {row}, col {col}) is not in the class map")]
    UnknownLabel {
        path: PathBuf,
        id: u8,
        row: usize,
        col: usize,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::Manifest { .. }
                | Error::UnknownLabel { .. }
                | Error::Format { .. }
                | Error::Json { .. }
                | Error::DimensionMismatch(_)
        )
    }
}
