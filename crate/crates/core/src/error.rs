use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate heading: agent of interest `{0}` has no two distinct observed positions")]
    DegenerateHeading(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("attention row {row} belongs to a present node but has no allowed entries")]
    EmptyAttentionRow { row: usize },

    #[error("{0} requires at least one row")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("scene record `{record}`: field `{field}`: {msg}")]
    Schema {
        record: String,
        field: String,
        msg: String,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(record: &str, field: &str, msg: impl Into<String>) -> Self {
        Error::Schema {
            record: record.to_string(),
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line harness: 2 for numerical
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFinite(_) => 2,
            _ => 1,
        }
    }
}
