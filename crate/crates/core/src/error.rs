use myoseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("volume format: {0}")]
    Format(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("phantom generation failed: {0}")]
    Phantom(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("statistics: {0}")]
    Stats(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("case {case_id}: {source}")]
    Case {
        case_id: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CoreError::Io { path: path.display().to_string(), source }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::InvalidArgument(msg.into()))
}
