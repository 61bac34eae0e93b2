use thiserror::Error;

/// Errors from tensor construction, graph ops, and serialization.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
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

    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("no gradient path: no input of this graph requires gradients")]
    NoGradPath,

    #[error("variables belong to different tapes (op {op})")]
    TapeMismatch { op: &'static str },

    #[error("{op}: non-finite value encountered: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("finite differences require step h > 0, got {h}")]
    NonPositiveStep { h: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad tensor dump: {0}")]
    Format(String),
}
