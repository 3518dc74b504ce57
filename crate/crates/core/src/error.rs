use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A shape, divisibility or range precondition was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was called in the wrong lifecycle state (e.g. backward twice).
    #[error("state error: {0}")]
    State(String),

    /// A forward value or gradient became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed dataset file.
    #[error("ingestion error in {path} at byte offset {offset}: {reason}")]
    Ingest {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Malformed config, checkpoint or manifest.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad arguments, files, configs)
    /// rather than by an internal fault.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Ingest { .. } | Error::Format(_) | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
