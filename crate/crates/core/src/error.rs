use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor ops, the model, training and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shapes {lhs:?} and {rhs:?} do not broadcast")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("kernel {kernel} exceeds padded extent {extent}")]
    KernelTooLarge { kernel: usize, extent: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("label value {0} is outside {{0, 1}}")]
    Label(u8),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{0} exceeds the oracle limit of {1} positions")]
    TooLarge(usize, usize),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
