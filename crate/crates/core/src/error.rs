use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error categories surfaced by every module of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("rank deficiency: {0}")]
    Rank(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Machine-parseable category name for an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Dimension,
    Rank,
    Config,
    Format,
    Data,
    Usage,
    Numeric,
    Io,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Dimension(_) => Category::Dimension,
            Error::Rank(_) => Category::Rank,
            Error::Config(_) => Category::Config,
            Error::Format { .. } => Category::Format,
            Error::Data(_) => Category::Data,
            Error::Usage(_) => Category::Usage,
            Error::Numeric(_) => Category::Numeric,
            Error::Io(_) => Category::Io,
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format { offset, reason: reason.into() }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Dimension => "dimension",
            Category::Rank => "rank",
            Category::Config => "config",
            Category::Format => "format",
            Category::Data => "data",
            Category::Usage => "usage",
            Category::Numeric => "numeric",
            Category::Io => "io",
        };
        f.write_str(s)
    }
}
