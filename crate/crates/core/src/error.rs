use std::path::PathBuf;

use thiserror::Error;
use vfiqa_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("clip {path}: {reason}")]
    Clip { path: PathBuf, reason: String },
    #[error("weights file: {0}")]
    Format(String),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Invalid(String),
    #[error("no such metric `{0}`")]
    UnknownMetric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
