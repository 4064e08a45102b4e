use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors (or a tensor and an expected shape) disagree.
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },
    /// Axis index out of range for the tensor rank.
    InvalidAxis { axis: usize, rank: usize },
    /// Data length does not match the product of the shape extents.
    DataLength { expected: usize, got: usize },
    /// Convolution/pooling geometry where the padded input is smaller than the filter.
    InvalidGeometry(String),
    /// Channel count of an input does not match a layer spec.
    ChannelMismatch { expected: usize, got: usize },
    /// A non-finite value surfaced on the training path.
    NonFinite { location: String },
    /// Backward was requested from a non-scalar root.
    NonScalarRoot { shape: Vec<usize> },
    /// A configuration value violates a documented invariant.
    InvalidConfig(String),
    /// Empty batch or dataset where at least one sample is required.
    EmptyInput(&'static str),
    /// Byte-level record or serialization problem, with the offending offset.
    Format { detail: String, offset: u64 },
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                left,
                right,
                context,
            } => write!(f, "shape mismatch in {context}: {left:?} vs {right:?}"),
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Error::InvalidGeometry(s) => write!(f, "invalid geometry: {s}"),
            Error::ChannelMismatch { expected, got } => {
                write!(f, "channel mismatch: spec expects {expected}, input has {got}")
            }
            Error::NonFinite { location } => {
                write!(f, "non-finite value detected at {location}")
            }
            Error::NonScalarRoot { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape:?}")
            }
            Error::InvalidConfig(s) => write!(f, "invalid config: {s}"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::Format { detail, offset } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
            Error::Io(s) => write!(f, "io error: {s}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
