use thiserror::Error;

use crate::model::TxId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transaction {0} references no accounts")]
    EmptyTransaction(TxId),

    #[error("invalid shard config: {0}")]
    InvalidConfig(String),

    #[error("invalid workload parameters: {0}")]
    InvalidWorkload(String),

    #[error("malformed chain: {0}")]
    MalformedChain(String),

    #[error("run did not quiesce by t={horizon_ms}ms ({pending} transactions unresolved)")]
    NonQuiescent { horizon_ms: u64, pending: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
