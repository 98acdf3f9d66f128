use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SgsError {
    /// Tensor shapes or lengths that do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },
}

impl SgsError {
    pub(crate) fn dim(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        SgsError::Dimension {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

pub type Result<T, E = SgsError> = std::result::Result<T, E>;
