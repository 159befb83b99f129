use thiserror::Error;

/// Errors raised by the optimizer laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EcoError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unstable parameters: {0}")]
    Unstable(String),

    #[error("inconsistent optimizer state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, EcoError>;

pub(crate) fn domain(msg: impl Into<String>) -> EcoError {
    EcoError::Domain(msg.into())
}
