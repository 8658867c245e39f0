use std::path::PathBuf;

/// Errors produced by the detector library.
///
/// The `kind()` string of each variant is stable and is what the CLI prints
/// as the machine-parseable reason on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("odd-spatial-dims: expected even height and width, got {height}x{width}")]
    OddSpatialDims { height: usize, width: usize },

    #[error("config-mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid-config: {0}")]
    InvalidConfig(String),

    #[error("input-size: expected {expected}x{expected} input, got {height}x{width}")]
    InputSize {
        expected: usize,
        height: usize,
        width: usize,
    },

    #[error("degenerate-box: {0}")]
    DegenerateBox(String),

    #[error("out-of-range: {0}")]
    OutOfRange(String),

    #[error("corrupt-checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unknown-layer: {name} (valid layers: {})", valid.join(", "))]
    UnknownLayer { name: String, valid: Vec<String> },

    #[error("dataset: {path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite-loss: epoch {epoch} batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image: {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short, stable identifier of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OddSpatialDims { .. } => "odd-spatial-dims",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InputSize { .. } => "input-size",
            Error::DegenerateBox(_) => "degenerate-box",
            Error::OutOfRange(_) => "out-of-range",
            Error::CorruptCheckpoint(_) => "corrupt-checkpoint",
            Error::UnknownLayer { .. } => "unknown-layer",
            Error::Dataset { .. } => "dataset",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Format(_) => "format",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
