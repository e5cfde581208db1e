use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A non-finite value was produced by the named operation.
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// A caller violated an operation's contract.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A request exceeds a configured resource budget.
    #[error("resource error: {0}")]
    Resource(String),

    /// Malformed file contents.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Checkpoint does not match the model it is loaded into.
    #[error("incompatible checkpoint at `{path}`: {message}")]
    Incompatible { path: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    /// True for errors caused by NaN/Inf values.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
