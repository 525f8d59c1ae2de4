use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, dimensions or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// A non-finite value or a failed factorization.
    #[error("numeric fault in {op}: {detail}")]
    Numeric { op: String, detail: String },
    /// An operation called out of order or on the wrong object.
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed input data (unknown token ids, bad files).
    #[error("data error: {0}")]
    Data(String),
    /// Backbone pretraining did not reach its retrieval target.
    #[error("pretraining fault: {0}")]
    Pretrain(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the message with extra context (step, modality, epoch).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric { op, detail } => Error::Numeric {
                op,
                detail: format!("{detail} [{ctx}]"),
            },
            Error::Config(m) => Error::Config(format!("{m} [{ctx}]")),
            Error::Usage(m) => Error::Usage(format!("{m} [{ctx}]")),
            Error::Data(m) => Error::Data(format!("{m} [{ctx}]")),
            Error::Pretrain(m) => Error::Pretrain(format!("{m} [{ctx}]")),
            other => other,
        }
    }

    /// True for faults that come from the numbers rather than from the caller.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Pretrain(_) | Error::Io { .. })
    }
}
