use std::path::PathBuf;

/// Errors surfaced by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    /// A documented precondition of an operation was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The network specification is malformed.
    #[error("network spec error: {0}")]
    Spec(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("input error: {0}")]
    Input(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
