use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by tensor operations, model construction and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("non-finite loss; offending parameter tensor `{param}`")]
    NonFiniteParam { param: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("channel count mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("backward called without retained forward state")]
    MissingForwardState,

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("spatial underflow at layer {layer}: {detail}")]
    SpatialUnderflow { layer: usize, detail: String },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

/// Failures while reading dataset files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated or oversized file, expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: record {index} has label {label}, expected < {classes}")]
    LabelOutOfRange { path: PathBuf, index: usize, label: u8, classes: usize },

    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    RecordLength { path: PathBuf, len: u64, record: usize },

    #[error("{path}: image dimensions {detail}")]
    Shape { path: PathBuf, detail: String },

    #[error("dataset is empty")]
    Empty,
}

/// Failures while saving or restoring checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found}, this build reads {supported}")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint was written for `{found}`, current model is `{expected}`")]
    DescriptorMismatch { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
