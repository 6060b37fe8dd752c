use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error in {file}: {reason}")]
    Ingest { file: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch} (non-finite loss); last good checkpoint: {last_checkpoint}")]
    Diverged { epoch: usize, last_checkpoint: String },

    #[error("missing prerequisite {artifact}; run `{stage}` first")]
    MissingPrerequisite { artifact: String, stage: String },

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
