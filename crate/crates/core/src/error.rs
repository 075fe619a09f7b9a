use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("parameter {0} is registered twice")]
    DuplicateParameter(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {0} has no group tag")]
    UntaggedParameter(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("objective is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("sequence of {len} tokens does not fit max_len {max_len}")]
    SequenceOverflow { len: usize, max_len: usize },
    #[error("caption does not parse: {0}")]
    CaptionParse(String),
    #[error("{spans} spans need more sentinels than the {available} available")]
    TooManySpans { spans: usize, available: usize },
    #[error("cannot build a mismatched pair: {0}")]
    NoMismatch(String),
    #[error("checkpoint parse error at byte {offset}: {reason}")]
    CheckpointParse { offset: usize, reason: String },
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
