//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },
    #[error("unknown behavior '{name}' (accepted: {accepted})")]
    UnknownBehavior { name: String, accepted: String },
    #[error("filters removed all data")]
    FiltersRemovedAll,
    #[error("behavior '{0}' has no training edges")]
    NoTrainEdges(String),
    #[error("edge ({user}, {item}) out of range for a {num_users}x{num_items} graph")]
    EdgeOutOfRange {
        user: u32,
        item: u32,
        num_users: usize,
        num_items: usize,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}; last good checkpoint retained")]
    Diverged { epoch: usize },
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
