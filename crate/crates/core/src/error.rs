use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or image had the wrong shape for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller-supplied argument is outside its documented domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// Input data violates a value contract (pixel range, age, attribute count, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Two components were built with incompatible settings.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// The operation needs a capability the supplied object does not have.
    #[error("capability error: {0}")]
    Capability(String),

    /// The dataset cannot serve the request (e.g. an empty age group).
    #[error("data error: {0}")]
    Data(String),

    /// A loss or gradient turned into NaN or infinity.
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
