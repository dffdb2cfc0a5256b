use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("statistics of an empty tensor are undefined")]
    EmptyTensor,

    #[error("infeasible convolution: {0}")]
    ConvGeometry(String),

    /// A layer rejected its input or its parameters.
    #[error("layer `{path}`: {reason}")]
    Layer { path: String, reason: String },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite values in `{path}`")]
    NonFinite { path: String },

    #[error("batch norm `{path}` needs more than one sample per batch in training mode")]
    SingleSampleBatch { path: String },

    /// Training produced a NaN or infinity.
    #[error("non-finite value at step {step}, first in `{path}`")]
    Diverged { step: u64, path: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn layer(path: &str, reason: impl Into<String>) -> Self {
        Error::Layer {
            path: path.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Dataset parsing failures. Each malformed-input case has its own variant.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file, need {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: file holds no records")]
    Empty { path: PathBuf },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: size {size} is not a multiple of the {record}-byte record size")]
    SizeNotMultiple {
        path: PathBuf,
        size: usize,
        record: usize,
    },

    #[error("{path}: record {record} has label {label}, expected 0..=9")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
