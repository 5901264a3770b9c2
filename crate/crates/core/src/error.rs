use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::distributions::DistError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("iteration {iter}: {source}")]
    Episode {
        iter: usize,
        #[source]
        source: DataError,
    },
    #[error("iteration {iter}: non-finite loss ({breakdown})")]
    NonFiniteLoss { iter: usize, breakdown: String },
    #[error("iteration {iter}: {source}")]
    Step {
        iter: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
