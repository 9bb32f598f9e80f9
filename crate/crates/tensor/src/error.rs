use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op} (node {node}): expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        expected: String,
        actual: String,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("input `{0}` is not bound in the graph")]
    UnboundInput(String),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("cross-entropy mask selects no rows")]
    EmptyMask,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
