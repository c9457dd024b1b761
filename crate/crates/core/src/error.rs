use thiserror::Error;

use crate::data::DataError;
use crate::registry::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    Length { len: usize, max: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("singular system: {0}")]
    Regularization(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_owned(),
            source: Box::new(self),
        }
    }
}
