//! Wire vocabulary between leader and destination shards.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{ShardId, SimTime, Subtransaction, SubtxKey, Transaction, TxId};

/// Attempt counter of a transaction. Bumped every time the leader re-dispatches
/// it, so replies belonging to an abandoned attempt can be told apart.
pub type Attempt = u32;

/// The closed set of message kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    SubtxDispatch,
    CommitVote,
    AbortVote,
    Commit,
    Abort,
    Committed,
    RestartVote,
    Aborted,
    Release,
    Restart,
    Released,
    Restarted,
    ForceRollback,
    Rollbacked,
    LowestIdGossip,
    ClientSubmit,
}

impl MessageKind {
    pub const ALL: [MessageKind; 16] = [
        MessageKind::SubtxDispatch,
        MessageKind::CommitVote,
        MessageKind::AbortVote,
        MessageKind::Commit,
        MessageKind::Abort,
        MessageKind::Committed,
        MessageKind::RestartVote,
        MessageKind::Aborted,
        MessageKind::Release,
        MessageKind::Restart,
        MessageKind::Released,
        MessageKind::Restarted,
        MessageKind::ForceRollback,
        MessageKind::Rollbacked,
        MessageKind::LowestIdGossip,
        MessageKind::ClientSubmit,
    ];
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The protocol step that consumes a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseTag {
    Phase(u8),
    Rollback,
    Gossip,
}

/// Maps a message kind to the phase that consumes it.
pub fn classify(kind: MessageKind) -> PhaseTag {
    use MessageKind::*;
    match kind {
        ClientSubmit => PhaseTag::Phase(1),
        SubtxDispatch => PhaseTag::Phase(2),
        CommitVote | AbortVote => PhaseTag::Phase(3),
        Commit | Abort => PhaseTag::Phase(4),
        Committed | RestartVote | Aborted => PhaseTag::Phase(5),
        Release | Restart => PhaseTag::Phase(6),
        Released | Restarted => PhaseTag::Phase(7),
        ForceRollback | Rollbacked => PhaseTag::Rollback,
        LowestIdGossip => PhaseTag::Gossip,
    }
}

/// A message exchanged between shards (or from a client to a leader).
///
/// Every per-fragment message names the fragment by `SubtxKey` and carries
/// the attempt it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolMessage {
    ClientSubmit { tx: Transaction },
    SubtxDispatch { subtx: Subtransaction, attempt: Attempt },
    CommitVote { key: SubtxKey, attempt: Attempt },
    AbortVote { key: SubtxKey, attempt: Attempt },
    Commit { key: SubtxKey, attempt: Attempt },
    Abort { key: SubtxKey, attempt: Attempt },
    Committed { key: SubtxKey, attempt: Attempt },
    RestartVote { key: SubtxKey, attempt: Attempt },
    Aborted { key: SubtxKey, attempt: Attempt },
    Release { key: SubtxKey, attempt: Attempt },
    Restart { key: SubtxKey, attempt: Attempt },
    Released { key: SubtxKey, attempt: Attempt },
    Restarted { key: SubtxKey, attempt: Attempt },
    /// Destination to leader: "roll back the transaction owning `key`".
    /// Leader to destination: "roll back fragment `key`".
    ForceRollback { key: SubtxKey, attempt: Attempt },
    Rollbacked { key: SubtxKey, attempt: Attempt },
    LowestIdGossip { lowest: Option<TxId> },
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        use ProtocolMessage as M;
        match self {
            M::ClientSubmit { .. } => MessageKind::ClientSubmit,
            M::SubtxDispatch { .. } => MessageKind::SubtxDispatch,
            M::CommitVote { .. } => MessageKind::CommitVote,
            M::AbortVote { .. } => MessageKind::AbortVote,
            M::Commit { .. } => MessageKind::Commit,
            M::Abort { .. } => MessageKind::Abort,
            M::Committed { .. } => MessageKind::Committed,
            M::RestartVote { .. } => MessageKind::RestartVote,
            M::Aborted { .. } => MessageKind::Aborted,
            M::Release { .. } => MessageKind::Release,
            M::Restart { .. } => MessageKind::Restart,
            M::Released { .. } => MessageKind::Released,
            M::Restarted { .. } => MessageKind::Restarted,
            M::ForceRollback { .. } => MessageKind::ForceRollback,
            M::Rollbacked { .. } => MessageKind::Rollbacked,
            M::LowestIdGossip { .. } => MessageKind::LowestIdGossip,
        }
    }

    /// The transaction this message concerns. `None` only for gossip.
    pub fn tx(&self) -> Option<TxId> {
        use ProtocolMessage as M;
        match self {
            M::ClientSubmit { tx } => Some(tx.id),
            M::SubtxDispatch { subtx, .. } => Some(subtx.parent),
            M::LowestIdGossip { .. } => None,
            M::CommitVote { key, .. }
            | M::AbortVote { key, .. }
            | M::Commit { key, .. }
            | M::Abort { key, .. }
            | M::Committed { key, .. }
            | M::RestartVote { key, .. }
            | M::Aborted { key, .. }
            | M::Release { key, .. }
            | M::Restart { key, .. }
            | M::Released { key, .. }
            | M::Restarted { key, .. }
            | M::ForceRollback { key, .. }
            | M::Rollbacked { key, .. } => Some(key.tx),
        }
    }

    /// The fragment this message concerns, if it is a per-fragment message.
    pub fn key(&self) -> Option<SubtxKey> {
        use ProtocolMessage as M;
        match self {
            M::ClientSubmit { .. } | M::LowestIdGossip { .. } => None,
            M::SubtxDispatch { subtx, .. } => Some(subtx.key()),
            M::CommitVote { key, .. }
            | M::AbortVote { key, .. }
            | M::Commit { key, .. }
            | M::Abort { key, .. }
            | M::Committed { key, .. }
            | M::RestartVote { key, .. }
            | M::Aborted { key, .. }
            | M::Release { key, .. }
            | M::Restart { key, .. }
            | M::Released { key, .. }
            | M::Restarted { key, .. }
            | M::ForceRollback { key, .. }
            | M::Rollbacked { key, .. } => Some(key.clone()),
        }
    }
}

/// Sender of an envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Client,
    Shard(ShardId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Client => f.write_str("client"),
            Endpoint::Shard(s) => s.fmt(f),
        }
    }
}

/// Which half of the receiving shard consumes a message. A shard can be
/// both leader and destination of one transaction, and `ForceRollback`
/// travels in both directions, so the kind alone does not say.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Leader,
    Destination,
    /// Gossip is read by both halves.
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: Endpoint,
    pub to: ShardId,
    pub role: Role,
    pub send_time: SimTime,
    pub deliver_time: SimTime,
    pub msg: ProtocolMessage,
}

/// One line of a message trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_send: SimTime,
    pub t_deliver: SimTime,
    pub from: Endpoint,
    pub to: ShardId,
    pub role: Role,
    pub kind: MessageKind,
    pub tx: Option<TxId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
}

impl From<&Envelope> for TraceRecord {
    fn from(env: &Envelope) -> Self {
        Self {
            t_send: env.send_time,
            t_deliver: env.deliver_time,
            from: env.from,
            to: env.to,
            role: env.role,
            kind: env.msg.kind(),
            tx: env.msg.tx(),
            object: env.msg.key().map(|k| k.object.0),
        }
    }
}
