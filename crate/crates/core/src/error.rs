use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("schema invariant violated ({invariant}): {detail}")]
    Schema { invariant: &'static str, detail: String },

    #[error("invalid annotation ({context}): {detail}")]
    Annotation { context: String, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Missing(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn schema(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Schema {
            invariant,
            detail: detail.into(),
        }
    }

    /// True for failures caused by non-finite values during training or inference.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
