use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("backward already ran on this tape; reset it before recording again")]
    BackwardTwice,
    #[error("backward requires a 1x1 loss node, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;
