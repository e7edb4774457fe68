use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Shapes that cannot be combined, reshaped or indexed as requested.
    #[error("rejected input: {0}")]
    Shape(String),

    /// An operation received values outside its mathematical domain, or
    /// produced a non-finite result.
    #[error("numeric domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A variable was used with a tape it does not belong to, or a
    /// non-scalar was used where a scalar loss is required.
    #[error("graph error: {0}")]
    Graph(String),

    /// Two forward passes with identical inputs disagreed.
    #[error("non-deterministic function: {0}")]
    Determinism(String),
}

impl TensorError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TensorError::Shape(msg.into())
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Domain {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
