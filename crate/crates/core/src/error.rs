use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch at index {index}: expected {expected}, found {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("coupling has mass {mass:e} at ({row}, {col}) where the product measure is zero")]
    InfeasibleSupport { row: usize, col: usize, mass: f64 },

    #[error("{rows}x{cols} instance exceeds the exact solver limit")]
    SizeLimit { rows: usize, cols: usize },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("sinkhorn did not converge for {context} (marginal error {marginal_error:e})")]
    NotConverged { context: String, marginal_error: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
