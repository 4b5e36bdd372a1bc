use std::path::PathBuf;

use thiserror::Error;
use ufo_tensor::TensorError;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate track: point coincides with a camera center")]
    DegenerateTrack,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ReconError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ReconError {
    let path = path.into();
    move |source| ReconError::Io { path, source }
}
