use morphwin_tensor::{CheckpointError, TensorError};
use thiserror::Error;

use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("window partition: axis {axis} has {dim} voxels, not divisible by window {window}")]
    Indivisible { axis: usize, dim: usize, window: usize },
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss at iteration {iteration} (pair {pair})")]
    NonFinite { iteration: usize, pair: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
