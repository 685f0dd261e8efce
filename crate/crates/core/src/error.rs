use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operand had the wrong extent along some dimension.
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("manifest row {row}: {reason}")]
    ManifestRow { row: usize, reason: String },

    #[error("manifest is missing required column `{0}`")]
    MissingColumn(&'static str),

    #[error("{0}")]
    Data(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            dim,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
