use std::path::PathBuf;

use thiserror::Error;

use crate::transport::FrameError;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("shard is empty: client has no data")]
    EmptyShard,

    #[error("no updates to aggregate")]
    EmptyUpdates,

    #[error("invalid weight {weight} for client {client_id}")]
    InvalidWeight { client_id: String, weight: f64 },

    #[error("cannot partition {sentences} sentences into {clients} shards")]
    Partition { sentences: usize, clients: usize },

    #[error("missing mask seed for pair ({0}, {1})")]
    MissingPairSeed(String, String),

    #[error("unsafe component `{name}`: {reason}")]
    UnsafeComponent { name: String, reason: String },

    #[error("duplicate site id `{0}`")]
    DuplicateSite(String),

    #[error("unknown site `{0}`")]
    UnknownSite(String),

    #[error("delivery to {to} failed after {attempts} attempts")]
    DeliveryFailed { to: String, attempts: u32 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: u64, reason: String },

    #[error("authentication failed: {0}")]
    Auth(String),

    #[error(transparent)]
    Frame(#[from] FrameError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Net(#[from] std::io::Error),
}

impl FedError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }
}
