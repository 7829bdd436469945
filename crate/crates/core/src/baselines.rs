//! Comparison protocols: a no-isolation destination and an exclusive-lock
//! destination. Both pair with a [`LeaderMode::TwoRound`] leader: dispatch
//! and vote, then commit and acknowledge.
//!
//! [`LeaderMode::TwoRound`]: crate::leader::LeaderMode::TwoRound

use std::collections::{BTreeMap, VecDeque};

use log::debug;

use crate::dest::{ChainDumpLine, ChainEntry, EntryStatus};
use crate::leader::Outgoing;
use crate::messages::{Attempt, ProtocolMessage};
use crate::model::{AccountId, ShardId, Subtransaction, SubtxKey, TxId, VersionedObject};

#[derive(Debug, Clone)]
struct Pending {
    subtx: Subtransaction,
    attempt: Attempt,
    leader: ShardId,
}

/// Plain balances plus an append-only log of applied fragments.
#[derive(Debug, Clone)]
struct Ledger {
    store: BTreeMap<AccountId, VersionedObject>,
    chain: Vec<ChainEntry>,
}

impl Ledger {
    fn new(accounts: impl IntoIterator<Item = (AccountId, i64)>) -> Self {
        Self {
            store: accounts
                .into_iter()
                .map(|(id, b)| (id.clone(), VersionedObject::new(id, b)))
                .collect(),
            chain: Vec::new(),
        }
    }

    fn admissible(&self, s: &Subtransaction) -> bool {
        self.store.get(&s.object).is_some_and(|o| s.admissible_at(o.balance))
    }

    fn apply(&mut self, p: &Pending) {
        let obj = self.store.get_mut(&p.subtx.object).expect("known account");
        let snapshot = obj.version;
        let mut resulting = None;
        if p.subtx.is_write() {
            obj.balance += p.subtx.delta();
            obj.version += 1;
            resulting = Some(obj.version);
        }
        self.chain.push(ChainEntry {
            seq: self.chain.len() as u64,
            subtx: p.subtx.clone(),
            attempt: p.attempt,
            leader: p.leader,
            status: EntryStatus::Released,
            snapshot_version: snapshot,
            resulting_version: resulting,
        });
    }

    fn vote(&self, p: &Pending) -> ProtocolMessage {
        let key = p.subtx.key();
        if self.admissible(&p.subtx) {
            ProtocolMessage::CommitVote { key, attempt: p.attempt }
        } else {
            ProtocolMessage::AbortVote { key, attempt: p.attempt }
        }
    }
}

/// Destination without isolation: conditions are checked at dispatch and
/// deltas applied blindly at commit.
#[derive(Debug, Clone)]
pub struct NoLockDest {
    pub shard_id: ShardId,
    ledger: Ledger,
    pending: BTreeMap<SubtxKey, Pending>,
}

impl NoLockDest {
    pub fn new(shard_id: ShardId, accounts: impl IntoIterator<Item = (AccountId, i64)>) -> Self {
        Self {
            shard_id,
            ledger: Ledger::new(accounts),
            pending: BTreeMap::new(),
        }
    }

    pub fn handle(&mut self, from: ShardId, msg: ProtocolMessage) -> Outgoing {
        use ProtocolMessage as M;
        match msg {
            M::SubtxDispatch { subtx, attempt } => {
                let p = Pending { subtx, attempt, leader: from };
                let vote = self.ledger.vote(&p);
                if vote.kind() == crate::messages::MessageKind::CommitVote {
                    self.pending.insert(p.subtx.key(), p);
                }
                vec![(from, vote)]
            }
            M::Commit { key, attempt } => match self.pending.remove(&key) {
                Some(p) if p.attempt == attempt => {
                    self.ledger.apply(&p);
                    vec![(p.leader, M::Committed { key, attempt })]
                }
                _ => Vec::new(),
            },
            M::Abort { key, attempt } => {
                self.pending.remove(&key);
                vec![(from, M::Aborted { key, attempt })]
            }
            M::Restart { key, attempt } => {
                self.pending.remove(&key);
                vec![(from, M::Restarted { key, attempt })]
            }
            M::LowestIdGossip { .. } => Vec::new(),
            other => panic!("{}: no-lock destination cannot handle {:?}", self.shard_id, other.kind()),
        }
    }

    pub fn snapshot(&self) -> Vec<VersionedObject> {
        self.ledger.store.values().cloned().collect()
    }

    pub fn chain(&self) -> &[ChainEntry] {
        &self.ledger.chain
    }

    pub fn chain_dump(&self) -> Vec<ChainDumpLine> {
        ChainDumpLine::from_entries(&self.ledger.chain)
    }

    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquire {
    Granted,
    Enqueued,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct LockState {
    holder: Option<TxId>,
    queue: VecDeque<TxId>,
}

/// Exclusive per-account locks with FIFO wait queues.
#[derive(Debug, Clone, Default)]
pub struct LockTable {
    locks: BTreeMap<AccountId, LockState>,
}

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&mut self, account: &AccountId, tx: TxId) -> Acquire {
        let l = self.locks.entry(account.clone()).or_default();
        match l.holder {
            None => {
                l.holder = Some(tx);
                Acquire::Granted
            }
            Some(h) if h == tx => Acquire::Granted,
            Some(_) => {
                if !l.queue.contains(&tx) {
                    l.queue.push_back(tx);
                }
                Acquire::Enqueued
            }
        }
    }

    /// Releases `tx`'s hold and hands the lock to the next waiter, if any.
    pub fn release(&mut self, account: &AccountId, tx: TxId) -> Option<TxId> {
        let l = self.locks.get_mut(account)?;
        if l.holder != Some(tx) {
            return None;
        }
        l.holder = l.queue.pop_front();
        let next = l.holder;
        if l.holder.is_none() {
            self.locks.remove(account);
        }
        next
    }

    /// Removes `tx` from the wait queue.
    pub fn dequeue(&mut self, account: &AccountId, tx: TxId) -> bool {
        let Some(l) = self.locks.get_mut(account) else {
            return false;
        };
        let before = l.queue.len();
        l.queue.retain(|t| *t != tx);
        before != l.queue.len()
    }

    pub fn holder(&self, account: &AccountId) -> Option<TxId> {
        self.locks.get(account).and_then(|l| l.holder)
    }

    pub fn waiters(&self, account: &AccountId) -> Vec<TxId> {
        self.locks
            .get(account)
            .map(|l| l.queue.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.locks.is_empty()
    }
}

/// Wait-timeout to arm for a blocked fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockTimer {
    pub key: SubtxKey,
    pub attempt: Attempt,
}

/// Destination under the exclusive-lock protocol. A fragment evaluates its
/// conditions only once it holds its account's lock, and the lock is kept
/// until the transaction commits or gives up.
#[derive(Debug, Clone)]
pub struct LockedDest {
    pub shard_id: ShardId,
    ledger: Ledger,
    table: LockTable,
    holding: BTreeMap<SubtxKey, Pending>,
    waiting: BTreeMap<SubtxKey, Pending>,
    pub deadlock_restarts: u64,
}

impl LockedDest {
    pub fn new(shard_id: ShardId, accounts: impl IntoIterator<Item = (AccountId, i64)>) -> Self {
        Self {
            shard_id,
            ledger: Ledger::new(accounts),
            table: LockTable::new(),
            holding: BTreeMap::new(),
            waiting: BTreeMap::new(),
            deadlock_restarts: 0,
        }
    }

    pub fn handle(&mut self, from: ShardId, msg: ProtocolMessage) -> (Outgoing, Vec<LockTimer>) {
        use ProtocolMessage as M;
        match msg {
            M::SubtxDispatch { subtx, attempt } => {
                let key = subtx.key();
                let p = Pending { subtx, attempt, leader: from };
                if !self.ledger.store.contains_key(&key.object) {
                    return (vec![(from, M::AbortVote { key, attempt })], Vec::new());
                }
                match self.table.acquire(&key.object, key.tx) {
                    Acquire::Granted => {
                        let vote = self.ledger.vote(&p);
                        self.holding.insert(key, p);
                        (vec![(from, vote)], Vec::new())
                    }
                    Acquire::Enqueued => {
                        self.waiting.insert(key.clone(), p);
                        (Vec::new(), vec![LockTimer { key, attempt }])
                    }
                }
            }
            M::Commit { key, attempt } => {
                let Some(p) = self.holding.get(&key).filter(|p| p.attempt == attempt).cloned() else {
                    return (Vec::new(), Vec::new());
                };
                self.ledger.apply(&p);
                let mut out = self.unlock(&key);
                out.push((p.leader, M::Committed { key, attempt }));
                (out, Vec::new())
            }
            M::Abort { key, attempt } => {
                let mut out = self.give_up(&key, attempt);
                out.push((from, M::Aborted { key, attempt }));
                (out, Vec::new())
            }
            M::Restart { key, attempt } => {
                let mut out = self.give_up(&key, attempt);
                out.push((from, M::Restarted { key, attempt }));
                (out, Vec::new())
            }
            M::LowestIdGossip { .. } => (Vec::new(), Vec::new()),
            other => panic!("{}: locked destination cannot handle {:?}", self.shard_id, other.kind()),
        }
    }

    fn give_up(&mut self, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        if self.holding.get(key).is_some_and(|p| p.attempt == attempt) {
            return self.unlock(key);
        }
        if self.waiting.get(key).is_some_and(|p| p.attempt == attempt) {
            self.waiting.remove(key);
            self.table.dequeue(&key.object, key.tx);
        }
        Vec::new()
    }

    /// Drops `key`'s lock; the next waiter takes it and votes.
    fn unlock(&mut self, key: &SubtxKey) -> Outgoing {
        self.holding.remove(key);
        let Some(next) = self.table.release(&key.object, key.tx) else {
            return Vec::new();
        };
        let next_key = SubtxKey {
            tx: next,
            object: key.object.clone(),
        };
        let p = self.waiting.remove(&next_key).expect("queued fragment is waiting");
        let vote = self.ledger.vote(&p);
        let leader = p.leader;
        self.holding.insert(next_key, p);
        vec![(leader, vote)]
    }

    /// Wait timeout of a blocked fragment. The younger of the waiter and the
    /// current holder is told to restart; the timer is re-armed while the
    /// fragment keeps waiting.
    pub fn on_timeout(&mut self, key: &SubtxKey, attempt: Attempt) -> (Outgoing, Vec<LockTimer>) {
        let Some(w) = self.waiting.get(key).filter(|p| p.attempt == attempt) else {
            return (Vec::new(), Vec::new());
        };
        let holder = self.table.holder(&key.object).expect("waiting on a held lock");
        let victim = if key.tx > holder {
            (w.leader, key.clone(), w.attempt)
        } else {
            let hk = SubtxKey {
                tx: holder,
                object: key.object.clone(),
            };
            let h = &self.holding[&hk];
            (h.leader, hk, h.attempt)
        };
        debug!("{}: wait timeout on {key}, restarting {}", self.shard_id, victim.1.tx);
        self.deadlock_restarts += 1;
        let out = vec![(
            victim.0,
            ProtocolMessage::RestartVote {
                key: victim.1,
                attempt: victim.2,
            },
        )];
        (out, vec![LockTimer { key: key.clone(), attempt }])
    }

    pub fn table(&self) -> &LockTable {
        &self.table
    }

    pub fn snapshot(&self) -> Vec<VersionedObject> {
        self.ledger.store.values().cloned().collect()
    }

    pub fn chain(&self) -> &[ChainEntry] {
        &self.ledger.chain
    }

    pub fn chain_dump(&self) -> Vec<ChainDumpLine> {
        ChainDumpLine::from_entries(&self.ledger.chain)
    }

    pub fn is_quiescent(&self) -> bool {
        self.holding.is_empty() && self.waiting.is_empty() && self.table.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::MessageKind;
    use crate::model::{Condition, Update};

    fn t(n: u64) -> TxId {
        TxId::new(n, 0, 0)
    }

    fn sub(tx: TxId, object: &str, cond: Option<i64>, delta: Option<i64>) -> Subtransaction {
        Subtransaction {
            parent: tx,
            shard: ShardId(0),
            object: object.into(),
            conditions: cond.map(|a| Condition::at_least(object, a)).into_iter().collect(),
            update: delta.map(|d| Update::new(object, d)),
        }
    }

    fn kinds(out: &Outgoing) -> Vec<(u32, MessageKind)> {
        out.iter().map(|(s, m)| (s.0, m.kind())).collect()
    }

    #[test]
    fn lock_free_then_queued_then_handed_over() {
        let mut lt = LockTable::new();
        let a: AccountId = "A".into();
        assert_eq!(lt.acquire(&a, t(1)), Acquire::Granted);
        assert_eq!(lt.acquire(&a, t(1)), Acquire::Granted);
        assert_eq!(lt.acquire(&a, t(2)), Acquire::Enqueued);
        assert_eq!(lt.acquire(&a, t(3)), Acquire::Enqueued);
        assert_eq!(lt.waiters(&a), vec![t(2), t(3)]);
        assert_eq!(lt.release(&a, t(2)), None, "non-holder cannot release");
        assert_eq!(lt.release(&a, t(1)), Some(t(2)));
        assert_eq!(lt.holder(&a), Some(t(2)));
        assert!(lt.dequeue(&a, t(3)));
        assert_eq!(lt.release(&a, t(2)), None);
        assert!(lt.is_empty());
    }

    #[test]
    fn nolock_interleaving_overdraws() {
        let mut d = NoLockDest::new(ShardId(0), [("A".into(), 100)]);
        let s1 = sub(t(1), "A", Some(100), Some(-100));
        let s2 = sub(t(2), "A", Some(100), Some(-100));
        let (k1, k2) = (s1.key(), s2.key());
        let out = d.handle(ShardId(1), ProtocolMessage::SubtxDispatch { subtx: s1, attempt: 1 });
        assert_eq!(kinds(&out), vec![(1, MessageKind::CommitVote)]);
        let out = d.handle(ShardId(2), ProtocolMessage::SubtxDispatch { subtx: s2, attempt: 1 });
        assert_eq!(kinds(&out), vec![(2, MessageKind::CommitVote)]);
        d.handle(ShardId(1), ProtocolMessage::Commit { key: k1, attempt: 1 });
        d.handle(ShardId(2), ProtocolMessage::Commit { key: k2, attempt: 1 });
        // No serial order admits both withdrawals.
        assert_eq!(d.snapshot()[0].balance, -100);
        assert_eq!(d.chain().len(), 2);
        assert!(d.is_quiescent());
    }

    #[test]
    fn nolock_failed_condition_votes_abort() {
        let mut d = NoLockDest::new(ShardId(0), [("A".into(), 5)]);
        let s = sub(t(1), "A", Some(10), None);
        let out = d.handle(ShardId(1), ProtocolMessage::SubtxDispatch { subtx: s, attempt: 1 });
        assert_eq!(kinds(&out), vec![(1, MessageKind::AbortVote)]);
        assert!(d.is_quiescent());
    }

    #[test]
    fn locked_waiter_votes_after_holder_commits() {
        let mut d = LockedDest::new(ShardId(0), [("A".into(), 100)]);
        let s1 = sub(t(1), "A", None, Some(-60));
        let s2 = sub(t(2), "A", Some(60), Some(-60));
        let (k1, k2) = (s1.key(), s2.key());
        let (out, timers) = d.handle(ShardId(1), ProtocolMessage::SubtxDispatch { subtx: s1, attempt: 1 });
        assert_eq!(kinds(&out), vec![(1, MessageKind::CommitVote)]);
        assert!(timers.is_empty());
        let (out, timers) = d.handle(ShardId(2), ProtocolMessage::SubtxDispatch { subtx: s2, attempt: 1 });
        assert!(out.is_empty());
        assert_eq!(timers, vec![LockTimer { key: k2.clone(), attempt: 1 }]);
        let (out, _) = d.handle(ShardId(1), ProtocolMessage::Commit { key: k1, attempt: 1 });
        // The waiter sees the post-commit balance 40 and votes abort.
        assert_eq!(
            kinds(&out),
            vec![(2, MessageKind::AbortVote), (1, MessageKind::Committed)]
        );
        let (out, _) = d.handle(ShardId(2), ProtocolMessage::Abort { key: k2, attempt: 1 });
        assert_eq!(kinds(&out), vec![(2, MessageKind::Aborted)]);
        assert!(d.is_quiescent());
        assert_eq!(d.snapshot()[0].balance, 40);
    }

    /// T1 holds A and waits for B on another shard while T2 holds B and
    /// waits for A. The timeout on either wait restarts T2, the younger.
    #[test]
    fn deadlock_resolved_by_restarting_youngest() {
        let mut sa = LockedDest::new(ShardId(0), [("A".into(), 100)]);
        let mut sb = LockedDest::new(ShardId(1), [("B".into(), 100)]);
        let (l1, l2) = (ShardId(2), ShardId(3));
        let t1a = sub(t(1), "A", None, Some(-1));
        let t2b = sub(t(2), "B", None, Some(-1));
        let mut t1b = sub(t(1), "B", None, Some(1));
        t1b.shard = ShardId(1);
        let t2a = sub(t(2), "A", None, Some(1));
        sa.handle(l1, ProtocolMessage::SubtxDispatch { subtx: t1a, attempt: 1 });
        sb.handle(l2, ProtocolMessage::SubtxDispatch { subtx: t2b, attempt: 1 });
        let (_, ta) = sa.handle(l2, ProtocolMessage::SubtxDispatch { subtx: t2a.clone(), attempt: 1 });
        let (_, tb) = sb.handle(l1, ProtocolMessage::SubtxDispatch { subtx: t1b.clone(), attempt: 1 });
        assert_eq!(ta.len(), 1);
        assert_eq!(tb.len(), 1);

        // Waiter T2 on A is younger than holder T1: T2 restarts.
        let (out, rearm) = sa.on_timeout(&t2a.key(), 1);
        assert_eq!(kinds(&out), vec![(3, MessageKind::RestartVote)]);
        assert_eq!(out[0].1.tx(), Some(t(2)));
        assert_eq!(rearm.len(), 1);
        // Waiter T1 on B is older than holder T2: the holder restarts.
        let (out, _) = sb.on_timeout(&t1b.key(), 1);
        assert_eq!(kinds(&out), vec![(3, MessageKind::RestartVote)]);
        assert_eq!(out[0].1.tx(), Some(t(2)));

        // T2's leader restarts it everywhere; T1 gets B and votes.
        let (out, _) = sb.handle(l2, ProtocolMessage::Restart { key: t2b_key(), attempt: 1 });
        assert_eq!(kinds(&out), vec![(2, MessageKind::CommitVote), (3, MessageKind::Restarted)]);
        let (out, _) = sa.handle(l2, ProtocolMessage::Restart { key: t2a.key(), attempt: 1 });
        assert_eq!(kinds(&out), vec![(3, MessageKind::Restarted)]);
        assert_eq!(sa.table().waiters(&"A".into()), Vec::<TxId>::new());
        // Late timer for the abandoned wait is a no-op.
        assert!(sa.on_timeout(&t2a.key(), 1).0.is_empty());
    }

    fn t2b_key() -> SubtxKey {
        SubtxKey {
            tx: t(2),
            object: "B".into(),
        }
    }
}
