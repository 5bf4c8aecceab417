use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters, model specs or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or volume dimensions do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was called in a context its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates a domain invariant (label values, empty masks, ...).
    #[error("invalid data: {0}")]
    Data(String),

    #[error("unsupported NRRD {field}: {value}")]
    UnsupportedNrrd { field: &'static str, value: String },

    #[error("malformed NRRD header: {0}")]
    NrrdHeader(String),

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    /// The training loss became NaN or infinite.
    #[error("non-finite loss at iteration {iteration}: sup={sup}, unsup={unsup}, total={total}")]
    NonFiniteLoss {
        iteration: usize,
        sup: f64,
        unsup: f64,
        total: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingInput(_) => 3,
            Error::Data(_) | Error::UnsupportedNrrd { .. } | Error::NrrdHeader(_) => 4,
            Error::Shape(_) | Error::Usage(_) => 5,
            Error::NonFiniteLoss { .. } => 6,
            Error::Checkpoint(_) => 7,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 1,
        }
    }
}
