use clear_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Arguments or configuration that fail validation.
    #[error("rejected input: {0}")]
    Input(String),

    /// Malformed file content. `offset` is the byte position where parsing
    /// failed.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("missing key `{0}`")]
    Key(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lambda = {lambda}): {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        lambda: f64,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn input(msg: impl Into<String>) -> Self {
        CoreError::Input(msg.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        CoreError::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// True for errors caused by what the caller passed in, as opposed to
    /// failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CoreError::Input(_) | CoreError::Format { .. } | CoreError::Key(_) | CoreError::Tensor(TensorError::Shape(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
