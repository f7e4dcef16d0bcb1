use std::path::PathBuf;

use celldetr_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("degenerate boxes: both have zero area and coincide")]
    DegenerateBoxes,
    #[error("cost matrix: {0}")]
    CostMatrix(String),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Config(String),
    #[error("sample '{id}': {message}")]
    Sample { id: String, message: String },
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
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (samples {ids:?}): class {class}, box {bbox}, seg {seg}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        ids: Vec<String>,
        class: f64,
        bbox: f64,
        seg: f64,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn sample(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Sample {
            id: id.into(),
            message: message.into(),
        }
    }
}
