use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("corrupt model file: {0}")]
    Corruption(String),

    #[error("cannot label {file:?}: {message}")]
    Labeling { file: String, message: String },

    #[error("failed to read {path}: {source}", path = path.display())]
    Input {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at batch {batch} of epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
