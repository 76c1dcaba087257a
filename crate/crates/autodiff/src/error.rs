use thiserror::Error;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross entropy: every position is masked out")]
    EmptyLoss,
    #[error("target label {label} out of range for {classes} classes at position {position}")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        position: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("adam: non-finite gradient for parameter `{0}`, step rejected")]
    NonFiniteGradient(String),
    #[error("adam: no state registered for parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, AdError>;
