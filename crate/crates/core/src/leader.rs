//! Leader side of the commit protocol: transaction pool, phases 1/3/5/7 and
//! the leader half of forced rollback.
//!
//! The same state machine also drives the two baselines. With
//! [`LeaderMode::TwoRound`] there is no release round: a transaction is
//! complete as soon as every fragment acknowledges the commit.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::messages::{Attempt, ProtocolMessage};
use crate::model::{split, AccountId, Partition, ShardId, SimTime, Subtransaction, SubtxKey, Transaction, TxId};

pub type Outgoing = Vec<(ShardId, ProtocolMessage)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeaderMode {
    /// Dispatch, vote, commit, release: the full seven-phase exchange.
    Lockless,
    /// Dispatch, vote, commit: used by the lock and no-lock baselines.
    TwoRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vote {
    Commit,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitAck {
    Committed,
    RestartVote,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalAck {
    Released,
    Restarted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Phase 1 sent, collecting votes.
    Voting,
    /// `Commit` broadcast, collecting phase-5 acks.
    Committing,
    /// `Abort` broadcast, collecting `Aborted`.
    Aborting,
    /// `Release` broadcast, collecting `Released`.
    Releasing,
    /// `Restart` broadcast, collecting `Restarted`.
    Restarting,
    /// `ForceRollback` broadcast, collecting `Rollbacked`.
    RollingBack,
    /// In the committed pool.
    Done,
}

/// Per-attempt bookkeeping of a transaction the leader is driving.
#[derive(Debug, Clone)]
pub struct TxProgress {
    pub tx: Transaction,
    pub attempt: Attempt,
    pub subtxs: Vec<Subtransaction>,
    pub stage: Stage,
    pub votes: BTreeMap<AccountId, Vote>,
    pub phase5_acks: BTreeMap<AccountId, CommitAck>,
    pub phase7_acks: BTreeMap<AccountId, FinalAck>,
    pub rollback_acks: BTreeSet<AccountId>,
}

impl TxProgress {
    fn new(tx: Transaction, attempt: Attempt, subtxs: Vec<Subtransaction>) -> Self {
        Self {
            tx,
            attempt,
            subtxs,
            stage: Stage::Voting,
            votes: BTreeMap::new(),
            phase5_acks: BTreeMap::new(),
            phase7_acks: BTreeMap::new(),
            rollback_acks: BTreeSet::new(),
        }
    }

    pub fn destinations(&self) -> BTreeSet<ShardId> {
        self.subtxs.iter().map(|s| s.shard).collect()
    }

    fn fanout(&self, make: impl Fn(SubtxKey, Attempt) -> ProtocolMessage) -> Outgoing {
        self.subtxs
            .iter()
            .map(|s| (s.shard, make(s.key(), self.attempt)))
            .collect()
    }

    fn covers(&self, object: &AccountId) -> bool {
        self.subtxs.iter().any(|s| &s.object == object)
    }

    fn all<V>(&self, acks: &BTreeMap<AccountId, V>, pred: impl Fn(&V) -> bool) -> bool {
        acks.len() == self.subtxs.len() && acks.values().all(pred)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Committed,
    Discarded,
}

/// Lifecycle record of one transaction, emitted to the metrics sink.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleRecord {
    pub tx: TxId,
    pub submitted_at: SimTime,
    pub attempts: u32,
    pub restarts: u32,
    pub rollbacks: u32,
    pub outcome: Option<Outcome>,
    pub commit_time: Option<SimTime>,
    /// Time of the last dispatch.
    pub last_start: Option<SimTime>,
}

#[derive(Debug, Clone)]
pub struct LeaderState {
    pub shard_id: ShardId,
    pub mode: LeaderMode,
    pub pipeline_depth: usize,
    partition: Partition,
    /// Pending pool, ordered by id.
    pub pool: BTreeMap<TxId, Transaction>,
    pub in_flight: BTreeMap<TxId, TxProgress>,
    pub committed: BTreeMap<TxId, TxProgress>,
    pub discarded: BTreeSet<TxId>,
    /// Latest lowest-id gossip per shard.
    pub known_lowest: BTreeMap<ShardId, Option<TxId>>,
    pub records: BTreeMap<TxId, LifecycleRecord>,
    reserved: usize,
}

impl LeaderState {
    pub fn new(shard_id: ShardId, mode: LeaderMode, pipeline_depth: usize, partition: Partition) -> Self {
        assert!(pipeline_depth >= 1, "pipeline depth must be positive");
        Self {
            shard_id,
            mode,
            pipeline_depth,
            partition,
            pool: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            committed: BTreeMap::new(),
            discarded: BTreeSet::new(),
            known_lowest: BTreeMap::new(),
            records: BTreeMap::new(),
            reserved: 0,
        }
    }

    /// Client arrival: the transaction enters the pool.
    pub fn submit(&mut self, tx: Transaction, now: SimTime) {
        debug_assert_eq!(tx.leader_shard, self.shard_id);
        self.records.entry(tx.id).or_insert(LifecycleRecord {
            tx: tx.id,
            submitted_at: now,
            attempts: 0,
            restarts: 0,
            rollbacks: 0,
            outcome: None,
            commit_time: None,
            last_start: None,
        });
        self.pool.insert(tx.id, tx);
    }

    fn active(&self) -> usize {
        self.in_flight.len()
    }

    /// Reserves dispatch decisions for free pipeline slots and returns how
    /// many were reserved. Each reservation must be redeemed by exactly one
    /// [`phase1_dispatch`](Self::phase1_dispatch) call.
    pub fn reserve_dispatches(&mut self) -> usize {
        let capacity = self.pipeline_depth.saturating_sub(self.active() + self.reserved);
        let wanted = self.pool.len().saturating_sub(self.reserved);
        let n = capacity.min(wanted);
        self.reserved += n;
        n
    }

    /// Phase 1: take the minimum-id pooled transaction, split it and send one
    /// dispatch per fragment.
    pub fn phase1_dispatch(&mut self, now: SimTime) -> Outgoing {
        self.reserved = self.reserved.saturating_sub(1);
        let Some((id, tx)) = self.pool.pop_first() else {
            return Vec::new();
        };
        let subtxs = split(&tx, &self.partition).expect("pooled transactions are well formed");
        let rec = self.records.get_mut(&id).expect("pooled transaction has a record");
        rec.attempts += 1;
        rec.last_start = Some(now);
        let progress = TxProgress::new(tx, rec.attempts, subtxs);
        let out = progress
            .subtxs
            .iter()
            .map(|s| {
                (
                    s.shard,
                    ProtocolMessage::SubtxDispatch {
                        subtx: s.clone(),
                        attempt: progress.attempt,
                    },
                )
            })
            .collect();
        self.in_flight.insert(id, progress);
        out
    }

    fn live(&mut self, key: &SubtxKey, attempt: Attempt, stage: Stage) -> Option<&mut TxProgress> {
        match self.in_flight.get_mut(&key.tx) {
            Some(p) if p.attempt == attempt && p.stage == stage && p.covers(&key.object) => Some(p),
            Some(_) => {
                debug!("{}: dropping stale message for {key} attempt {attempt}", self.shard_id);
                None
            }
            None => {
                debug!("{}: message for unknown {key}", self.shard_id);
                None
            }
        }
    }

    /// Phase 3: record a vote; broadcast `Commit` once every fragment voted
    /// commit, or `Abort` on the first abort vote.
    pub fn phase3_collect(&mut self, key: &SubtxKey, attempt: Attempt, vote: Vote) -> Outgoing {
        let Some(p) = self.live(key, attempt, Stage::Voting) else {
            return Vec::new();
        };
        p.votes.insert(key.object.clone(), vote);
        match vote {
            Vote::Abort => {
                p.stage = Stage::Aborting;
                p.fanout(|key, attempt| ProtocolMessage::Abort { key, attempt })
            }
            Vote::Commit if p.all(&p.votes, |v| *v == Vote::Commit) => {
                p.stage = Stage::Committing;
                p.fanout(|key, attempt| ProtocolMessage::Commit { key, attempt })
            }
            Vote::Commit => Vec::new(),
        }
    }

    /// A restart request while votes are still outstanding. Only the lock
    /// baseline sends these (deadlock resolution).
    pub fn restart_while_voting(&mut self, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        let Some(p) = self.live(key, attempt, Stage::Voting) else {
            return Vec::new();
        };
        p.stage = Stage::Restarting;
        p.fanout(|key, attempt| ProtocolMessage::Restart { key, attempt })
    }

    /// Phase 5: `Release` on all-committed, `Restart` on any restart vote,
    /// discard on all-aborted. In two-round mode all-committed completes the
    /// transaction directly.
    pub fn phase5_collect(&mut self, key: &SubtxKey, attempt: Attempt, ack: CommitAck, now: SimTime) -> Outgoing {
        let expected = if ack == CommitAck::Aborted {
            Stage::Aborting
        } else {
            Stage::Committing
        };
        if ack == CommitAck::RestartVote && self.mode == LeaderMode::TwoRound {
            return self.restart_while_voting(key, attempt);
        }
        let mode = self.mode;
        let Some(p) = self.live(key, attempt, expected) else {
            return Vec::new();
        };
        p.phase5_acks.insert(key.object.clone(), ack);
        match ack {
            CommitAck::RestartVote => {
                p.stage = Stage::Restarting;
                p.fanout(|key, attempt| ProtocolMessage::Restart { key, attempt })
            }
            CommitAck::Committed if p.all(&p.phase5_acks, |a| *a == CommitAck::Committed) => {
                if mode == LeaderMode::TwoRound {
                    self.complete(key.tx, now);
                    Vec::new()
                } else {
                    p.stage = Stage::Releasing;
                    p.fanout(|key, attempt| ProtocolMessage::Release { key, attempt })
                }
            }
            CommitAck::Aborted if p.all(&p.phase5_acks, |a| *a == CommitAck::Aborted) => {
                let id = key.tx;
                self.in_flight.remove(&id);
                self.discarded.insert(id);
                let rec = self.records.get_mut(&id).expect("record");
                rec.outcome = Some(Outcome::Discarded);
                rec.commit_time = None;
                debug!("{}: {id} discarded at {now}", self.shard_id);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    fn complete(&mut self, id: TxId, now: SimTime) {
        let mut p = self.in_flight.remove(&id).expect("completing an in-flight transaction");
        p.stage = Stage::Done;
        self.committed.insert(id, p);
        let rec = self.records.get_mut(&id).expect("record");
        rec.outcome = Some(Outcome::Committed);
        rec.commit_time = Some(now);
    }

    fn repool(&mut self, p: TxProgress) {
        let id = p.tx.id;
        self.pool.insert(id, p.tx);
    }

    /// Phase 7: all-released completes the transaction, all-restarted puts it
    /// back into the pool under its original id.
    pub fn phase7_collect(&mut self, key: &SubtxKey, attempt: Attempt, ack: FinalAck, now: SimTime) -> Outgoing {
        let expected = match ack {
            FinalAck::Released => Stage::Releasing,
            FinalAck::Restarted => Stage::Restarting,
        };
        let Some(p) = self.live(key, attempt, expected) else {
            return Vec::new();
        };
        p.phase7_acks.insert(key.object.clone(), ack);
        if !p.all(&p.phase7_acks, |a| *a == ack) {
            return Vec::new();
        }
        match ack {
            FinalAck::Released => self.complete(key.tx, now),
            FinalAck::Restarted => {
                let p = self.in_flight.remove(&key.tx).expect("in flight");
                self.records.get_mut(&key.tx).expect("record").restarts += 1;
                self.repool(p);
            }
        }
        Vec::new()
    }

    /// A destination asks to roll back the transaction owning `key`.
    ///
    /// Broadcasts `ForceRollback` for every fragment of that transaction and
    /// cancels its pending phase guards. Requests for unknown transactions,
    /// stale attempts or transactions already rolling back are no-ops.
    /// Transactions that are aborting or restarting are left alone: those
    /// rounds already clear every fragment.
    pub fn handle_force_rollback(&mut self, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        let p = match (self.in_flight.get_mut(&key.tx), self.committed.get_mut(&key.tx)) {
            (Some(p), _) | (None, Some(p)) => p,
            (None, None) => {
                debug!("{}: rollback request for unknown {}", self.shard_id, key.tx);
                return Vec::new();
            }
        };
        if p.attempt != attempt {
            debug!("{}: stale rollback request for {key} attempt {attempt}", self.shard_id);
            return Vec::new();
        }
        match p.stage {
            Stage::RollingBack | Stage::Aborting | Stage::Restarting => Vec::new(),
            Stage::Voting | Stage::Committing | Stage::Releasing | Stage::Done => {
                p.stage = Stage::RollingBack;
                p.rollback_acks.clear();
                p.fanout(|key, attempt| ProtocolMessage::ForceRollback { key, attempt })
            }
        }
    }

    /// Collects `Rollbacked`; once every fragment confirmed, the transaction
    /// leaves the committed pool (if it was there) and re-enters the pending
    /// pool with its original id.
    pub fn handle_rollbacked(&mut self, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        let in_committed = !self.in_flight.contains_key(&key.tx);
        let slot = if in_committed {
            self.committed.get_mut(&key.tx)
        } else {
            self.in_flight.get_mut(&key.tx)
        };
        let Some(p) = slot else {
            warn!("{}: rollbacked for unknown {key}", self.shard_id);
            return Vec::new();
        };
        if p.attempt != attempt || p.stage != Stage::RollingBack || !p.covers(&key.object) {
            return Vec::new();
        }
        p.rollback_acks.insert(key.object.clone());
        if p.rollback_acks.len() < p.subtxs.len() {
            return Vec::new();
        }
        let p = if in_committed {
            self.committed.remove(&key.tx)
        } else {
            self.in_flight.remove(&key.tx)
        }
        .expect("present");
        let rec = self.records.get_mut(&key.tx).expect("record");
        rec.rollbacks += 1;
        rec.outcome = None;
        rec.commit_time = None;
        self.repool(p);
        Vec::new()
    }

    /// Smallest id over the pool and everything in flight.
    pub fn lowest_pending(&self) -> Option<TxId> {
        let pooled = self.pool.keys().next().copied();
        let running = self.in_flight.keys().next().copied();
        let rolling = self
            .committed
            .values()
            .filter(|p| p.stage == Stage::RollingBack)
            .map(|p| p.tx.id)
            .next();
        [pooled, running, rolling].into_iter().flatten().min()
    }

    /// Periodic lowest-id announcement to every shard (this one included).
    pub fn gossip_lowest(&self, shard_count: u32) -> Outgoing {
        let lowest = self.lowest_pending();
        (0..shard_count)
            .map(|s| (ShardId(s), ProtocolMessage::LowestIdGossip { lowest }))
            .collect()
    }

    /// True when nothing is pooled, running or rolling back.
    pub fn is_idle(&self) -> bool {
        self.pool.is_empty()
            && self.in_flight.is_empty()
            && self.committed.values().all(|p| p.stage == Stage::Done)
    }

    /// Every transaction ever submitted here is in exactly one of pool,
    /// in-flight, committed or discarded.
    pub fn check_conservation(&self) -> Result<(), String> {
        for id in self.records.keys() {
            let n = usize::from(self.pool.contains_key(id))
                + usize::from(self.in_flight.contains_key(id))
                + usize::from(self.committed.contains_key(id))
                + usize::from(self.discarded.contains(id));
            if n != 1 {
                return Err(format!("{id} present in {n} pools"));
            }
        }
        Ok(())
    }
}
