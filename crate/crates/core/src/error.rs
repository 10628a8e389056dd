use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank mismatch: {0}")]
    RankMismatch(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("adapter `{0}` already registered")]
    Conflict(String),

    #[error("adapter `{0}` not found")]
    NotFound(String),

    #[error("no candidate adapters available")]
    EmptyPool,

    #[error("batch plan has no adapters for any sample")]
    EmptyPlan,

    #[error("empty input after tokenization")]
    EmptyInput,

    #[error("plan built against snapshot v{plan} but executed against v{snapshot}")]
    Stale { plan: u64, snapshot: u64 },

    #[error("parse error in {} at byte {offset}: {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input rather than by the runtime environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Stale { .. })
    }
}
