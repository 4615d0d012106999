use thiserror::Error;

use crate::data::{CheckpointError, DataError};
use crate::search_space::{SearchError, Violation};
use crate::tensor::TensorError;
use crate::training::TrainError;

/// Any failure surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<Vec<Violation>> for Error {
    fn from(v: Vec<Violation>) -> Self {
        Error::Search(SearchError::Invalid(v))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
