use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic {found:02x?} (expected \"RQTF\")")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {found} (expected 1)")]
    UnsupportedVersion { found: u32 },

    #[error("truncated payload in tensor {tensor:?} at offset {offset}: {detail}")]
    TruncatedPayload {
        tensor: String,
        offset: u64,
        detail: String,
    },

    #[error("duplicate tensor name {name:?}")]
    DuplicateName { name: String },

    #[error("non-finite value in tensor {tensor:?} at element {index}")]
    NonFiniteData { tensor: String, index: usize },

    #[error("malformed entry for tensor {tensor:?} at offset {offset}: {detail}")]
    MalformedEntry {
        tensor: String,
        offset: u64,
        detail: String,
    },

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid shape {shape:?} for tensor {tensor:?}: {detail}")]
    InvalidShape {
        tensor: String,
        shape: Vec<usize>,
        detail: String,
    },

    #[error("tensor {tensor:?} has dtype {found}, expected {expected}")]
    WrongDType {
        tensor: String,
        found: &'static str,
        expected: &'static str,
    },

    #[error("shape {shape:?} of tensor {tensor:?} is not divisible for {granularity}")]
    ShapeNotDivisible {
        tensor: String,
        shape: Vec<usize>,
        granularity: String,
    },

    #[error("granularity {granularity} is not valid: {detail}")]
    BadGranularity { granularity: String, detail: String },

    #[error("non-finite input in tensor {tensor:?} at element {index}")]
    NonFiniteInput { tensor: String, index: usize },

    #[error("non-finite activation in tensor {tensor:?} at element {index}")]
    NonFiniteActivation { tensor: String, index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("k = {k} out of range for input of length {n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("NaN at index {index}")]
    NaNInput { index: usize },

    #[error("tensor {tensor:?} is empty")]
    EmptyTensor { tensor: String },

    #[error("no tensors to aggregate")]
    EmptyList,

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("bad spec: {0}")]
    BadSpec(String),
}

impl Error {
    /// Stable, machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BadMagic { .. } => "BadMagic",
            Error::UnsupportedVersion { .. } => "UnsupportedVersion",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::DuplicateName { .. } => "DuplicateName",
            Error::NonFiniteData { .. } => "NonFiniteData",
            Error::MalformedEntry { .. } => "MalformedEntry",
            Error::IoFailure { .. } => "IoFailure",
            Error::InvalidShape { .. } => "InvalidShape",
            Error::WrongDType { .. } => "WrongDType",
            Error::ShapeNotDivisible { .. } => "ShapeNotDivisible",
            Error::BadGranularity { .. } => "BadGranularity",
            Error::NonFiniteInput { .. } => "NonFiniteInput",
            Error::NonFiniteActivation { .. } => "NonFiniteActivation",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::KOutOfRange { .. } => "KOutOfRange",
            Error::NaNInput { .. } => "NaNInput",
            Error::EmptyTensor { .. } => "EmptyTensor",
            Error::EmptyList => "EmptyList",
            Error::BadConfig(_) => "BadConfig",
            Error::BadSpec(_) => "BadSpec",
        }
    }
}
