use std::path::PathBuf;

use crate::data::{ClientId, Uid};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible stability budget: mini-batch size {batch} exceeds local dataset size {local}")]
    InfeasibleBudget { batch: f64, local: usize },

    #[error("client {client} holds {available} points, fewer than the mini-batch size {batch}")]
    InfeasibleBatch {
        client: ClientId,
        available: usize,
        batch: usize,
    },

    #[error("client {0} not found")]
    ClientNotFound(ClientId),

    #[error("sample {uid} not found in client {client}")]
    SampleNotFound { client: ClientId, uid: Uid },

    #[error("stale request: {0} was already deleted")]
    StaleRequest(String),

    #[error("federation would be empty after removing client {0}")]
    EmptyFederation(ClientId),

    #[error("corrupted history: {0}")]
    CorruptedHistory(String),

    #[error("operation requires {expected} storage but the store is {actual}")]
    ModeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("dataset digest mismatch: checkpoint has {expected:016x}, dataset has {actual:016x}")]
    DigestMismatch { expected: u64, actual: u64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("gradient diversity undefined: squared norm of mean gradient {0:e} below guard")]
    DivergedDiversity(f64),

    #[error("history space too large to enumerate: {states} states exceeds budget {budget}")]
    TooLargeToEnumerate { states: f64, budget: u64 },

    #[error("bins too fine: expected count {expected:.3} in bin {bin} is below 5")]
    BinsTooFine { bin: usize, expected: f64 },

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
