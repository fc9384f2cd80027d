use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("loss does not depend on any leaf with requires_grad set")]
    NoGradLeaves,

    #[error("{op}: token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { op: &'static str, id: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence of {len} tokens is too short (need at least {min})")]
    SequenceTooShort { len: usize, min: usize },

    #[error("unknown parameter path '{path}'")]
    UnknownPath { path: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid mask spec: {0}")]
    InvalidMaskSpec(String),

    #[error("empty target set for mask training")]
    EmptyTargets,

    #[error("corrupt {kind} file at byte {offset}: {reason}")]
    CorruptFile {
        kind: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("degenerate scan directions (|cos| = {cos:.4}); directions must not be collinear")]
    DegenerateDirections { cos: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
