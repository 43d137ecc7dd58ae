use thiserror::Error;

/// Errors produced by the evaluation pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid image data: {0}")]
    InvalidImage(String),

    #[error("class index {class} out of range for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no blur sigma in the grid reaches chance accuracy (threshold {threshold:.4})")]
    CalibrationFailed {
        threshold: f64,
        /// `(sigma, accuracy)` for every grid entry that was evaluated.
        curve: Vec<(f64, f64)>,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
