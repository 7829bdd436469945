//! Destination side of the commit protocol: validation against object
//! snapshots, the local chain, and the rollback cascade.
//!
//! Each account keeps a released balance, a provisional balance (released
//! plus the delta of a tentatively committed writer), a version counter and
//! the sequence number of the last released write (`head`). A fragment's
//! snapshot is the `head` it observed when it was validated. Sequence numbers
//! are never reused, so comparing heads detects every intervening release or
//! undo, even when the version counter returns to an earlier value.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::leader::Outgoing;
use crate::messages::{Attempt, ProtocolMessage};
use crate::model::{AccountId, ShardId, Subtransaction, SubtxKey, TxId, VersionedObject};

/// Which chain entries a forced rollback removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackScope {
    /// Everything appended to the shard's chain at or after the rolled-back
    /// entry.
    ShardSuffix,
    /// Only entries on the same account at or after the rolled-back entry,
    /// i.e. the fragments that observed its write.
    #[default]
    ObjectSuffix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Tentative,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainEntry {
    /// Append sequence number, unique for the lifetime of the shard.
    pub seq: u64,
    pub subtx: Subtransaction,
    pub attempt: Attempt,
    pub leader: ShardId,
    pub status: EntryStatus,
    pub snapshot_version: u64,
    pub resulting_version: Option<u64>,
}

/// One line of a chain dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainDumpLine {
    pub seq: usize,
    pub tx: TxId,
    pub subtx_object: AccountId,
    pub status: EntryStatus,
    pub snapshot_v: u64,
    pub result_v: Option<u64>,
    #[serde(default)]
    pub delta: i64,
}

impl ChainDumpLine {
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = &'a ChainEntry>) -> Vec<Self> {
        entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| ChainDumpLine {
                seq: i,
                tx: e.subtx.parent,
                subtx_object: e.subtx.object.clone(),
                status: e.status,
                snapshot_v: e.snapshot_version,
                result_v: e.resulting_version,
                delta: e.subtx.delta(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Slot {
    released: i64,
    balance: i64,
    version: u64,
    head: Option<u64>,
}

/// Live state of a fragment between phase 2 and phase 6.
#[derive(Debug, Clone)]
struct Record {
    attempt: Attempt,
    subtx: Subtransaction,
    leader: ShardId,
    snapshot_head: Option<u64>,
    snapshot_version: u64,
    in_chain: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestStats {
    pub commit_votes: u64,
    pub abort_votes: u64,
    pub restart_votes: u64,
    pub override_commits: u64,
    pub rollback_requests_sent: u64,
    pub entries_undone: u64,
    pub stale_dropped: u64,
}

#[derive(Debug, Clone)]
pub struct DestState {
    pub shard_id: ShardId,
    pub scope: RollbackScope,
    store: BTreeMap<AccountId, Slot>,
    read_sets: BTreeMap<AccountId, BTreeSet<SubtxKey>>,
    write_sets: BTreeMap<AccountId, BTreeSet<SubtxKey>>,
    records: BTreeMap<SubtxKey, Record>,
    /// Highest attempt per fragment that has been closed (aborted, restarted
    /// or rolled back); messages for closed attempts are dropped.
    closed: BTreeMap<SubtxKey, Attempt>,
    chain: Vec<ChainEntry>,
    next_seq: u64,
    latest_gossip: BTreeMap<ShardId, Option<TxId>>,
    lowest_known: Option<TxId>,
    pub stats: DestStats,
}

impl DestState {
    pub fn new(
        shard_id: ShardId,
        accounts: impl IntoIterator<Item = (AccountId, i64)>,
        scope: RollbackScope,
    ) -> Self {
        let store = accounts
            .into_iter()
            .map(|(id, balance)| {
                assert!(balance >= 0, "initial balance of {id} is negative");
                (
                    id,
                    Slot {
                        released: balance,
                        balance,
                        version: 0,
                        head: None,
                    },
                )
            })
            .collect();
        Self {
            shard_id,
            scope,
            store,
            read_sets: BTreeMap::new(),
            write_sets: BTreeMap::new(),
            records: BTreeMap::new(),
            closed: BTreeMap::new(),
            chain: Vec::new(),
            next_seq: 0,
            latest_gossip: BTreeMap::new(),
            lowest_known: None,
            stats: DestStats::default(),
        }
    }

    pub fn lowest_known(&self) -> Option<TxId> {
        self.lowest_known
    }

    pub fn chain(&self) -> &[ChainEntry] {
        &self.chain
    }

    pub fn chain_dump(&self) -> Vec<ChainDumpLine> {
        ChainDumpLine::from_entries(&self.chain)
    }

    /// Read-only view of every account on this shard.
    pub fn snapshot(&self) -> Vec<VersionedObject> {
        self.store
            .iter()
            .map(|(id, s)| VersionedObject {
                id: id.clone(),
                balance: s.balance,
                version: s.version,
            })
            .collect()
    }

    pub fn object(&self, id: &AccountId) -> Option<VersionedObject> {
        self.store.get(id).map(|s| VersionedObject {
            id: id.clone(),
            balance: s.balance,
            version: s.version,
        })
    }

    pub fn read_set(&self, id: &AccountId) -> BTreeSet<SubtxKey> {
        self.read_sets.get(id).cloned().unwrap_or_default()
    }

    pub fn write_set(&self, id: &AccountId) -> BTreeSet<SubtxKey> {
        self.write_sets.get(id).cloned().unwrap_or_default()
    }

    /// Recorded snapshot version of a live fragment.
    pub fn snapshot_of(&self, key: &SubtxKey) -> Option<u64> {
        self.records.get(key).map(|r| r.snapshot_version)
    }

    /// No fragment between phase 2 and phase 6.
    pub fn is_quiescent(&self) -> bool {
        self.records.is_empty() && self.chain.iter().all(|e| e.status == EntryStatus::Released)
    }

    /// Dispatches one protocol message from `from`.
    pub fn handle(&mut self, from: ShardId, msg: ProtocolMessage) -> Outgoing {
        use ProtocolMessage as M;
        match msg {
            M::SubtxDispatch { subtx, attempt } => self.phase2_validate(from, subtx, attempt),
            M::Commit { key, attempt } => self.phase4_commit(&key, attempt),
            M::Abort { key, attempt } => self.phase4_abort(from, &key, attempt),
            M::Release { key, attempt } => self.phase6_release(&key, attempt),
            M::Restart { key, attempt } => self.phase6_restart(from, &key, attempt),
            M::ForceRollback { key, attempt } => self.handle_force_rollback(from, &key, attempt),
            M::LowestIdGossip { lowest } => {
                self.update_lowest(from, lowest);
                Vec::new()
            }
            other => panic!("{}: destination cannot handle {:?}", self.shard_id, other.kind()),
        }
    }

    fn is_closed(&self, key: &SubtxKey, attempt: Attempt) -> bool {
        self.closed.get(key).is_some_and(|a| *a >= attempt)
    }

    fn close(&mut self, key: &SubtxKey, attempt: Attempt) {
        let slot = self.closed.entry(key.clone()).or_insert(attempt);
        *slot = (*slot).max(attempt);
    }

    fn live_record(&self, key: &SubtxKey, attempt: Attempt) -> bool {
        self.records.get(key).is_some_and(|r| r.attempt == attempt)
    }

    fn forget(&mut self, key: &SubtxKey) -> Option<Record> {
        if let Some(r) = self.read_sets.get_mut(&key.object) {
            r.remove(key);
        }
        if let Some(w) = self.write_sets.get_mut(&key.object) {
            w.remove(key);
        }
        self.records.remove(key)
    }

    /// Phase 2: snapshot the object, check conditions and overdraft against
    /// its released balance, join R (and W for writers) and vote.
    pub fn phase2_validate(&mut self, leader: ShardId, subtx: Subtransaction, attempt: Attempt) -> Outgoing {
        debug_assert_eq!(subtx.shard, self.shard_id, "fragment routed to the wrong shard");
        let key = subtx.key();
        if self.is_closed(&key, attempt) || self.live_record(&key, attempt) {
            self.stats.stale_dropped += 1;
            return Vec::new();
        }
        if self.records.contains_key(&key) {
            debug!("{}: replacing record of {key} by attempt {attempt}", self.shard_id);
            self.forget(&key);
        }
        let Some(slot) = self.store.get(&subtx.object) else {
            self.stats.abort_votes += 1;
            return vec![(leader, ProtocolMessage::AbortVote { key, attempt })];
        };
        if !subtx.admissible_at(slot.released) {
            self.stats.abort_votes += 1;
            return vec![(leader, ProtocolMessage::AbortVote { key, attempt })];
        }
        let record = Record {
            attempt,
            leader,
            snapshot_head: slot.head,
            snapshot_version: slot.version,
            in_chain: false,
            subtx,
        };
        self.read_sets
            .entry(key.object.clone())
            .or_default()
            .insert(key.clone());
        if record.subtx.is_write() {
            self.write_sets
                .entry(key.object.clone())
                .or_default()
                .insert(key.clone());
        }
        self.records.insert(key.clone(), record);
        self.stats.commit_votes += 1;
        vec![(leader, ProtocolMessage::CommitVote { key, attempt })]
    }

    /// Phase 4, commit branch.
    ///
    /// The fragment is appended when no other writer is registered on its
    /// object (or it is the only reader-writer) and the object's head is the
    /// one it validated against. Failing that, a fragment of the lowest known
    /// transaction still commits: every other registered writer and every
    /// write released since its snapshot are rolled back first, which returns
    /// the object to the state it validated against.
    pub fn phase4_commit(&mut self, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        let Some(rec) = self.records.get(key).filter(|r| r.attempt == attempt) else {
            self.stats.stale_dropped += 1;
            return Vec::new();
        };
        if rec.in_chain {
            self.stats.stale_dropped += 1;
            return Vec::new();
        }
        let leader = rec.leader;
        let object = key.object.clone();
        let w_others: Vec<SubtxKey> = self
            .write_set(&object)
            .into_iter()
            .filter(|k| k != key)
            .collect();
        let r_others = self.read_set(&object).iter().filter(|k| *k != key).count();
        let in_w = self.write_sets.get(&object).is_some_and(|w| w.contains(key));
        let head_now = self.store[&object].head;
        let eligible =
            (w_others.is_empty() || (in_w && r_others == 0)) && head_now == rec.snapshot_head;
        let mut out = Vec::new();
        if !eligible {
            if self.lowest_known != Some(key.tx) {
                return vec![self.vote_restart(key, attempt)];
            }
            out = self.evict_for(key);
            if self.store[&object].head != self.records[key].snapshot_head {
                // The validated state itself was undone by an earlier cascade.
                out.push(self.vote_restart(key, attempt));
                return out;
            }
            self.stats.override_commits += 1;
        }
        self.append_tentative(key);
        out.push((leader, ProtocolMessage::Committed { key: key.clone(), attempt }));
        out
    }

    /// A restart vote always ends this attempt, so the fragment leaves R and
    /// W at once instead of blocking other writers until `Restart` arrives.
    fn vote_restart(&mut self, key: &SubtxKey, attempt: Attempt) -> (ShardId, ProtocolMessage) {
        let rec = self.forget(key).expect("live record");
        self.close(key, attempt);
        self.stats.restart_votes += 1;
        (rec.leader, ProtocolMessage::RestartVote { key: key.clone(), attempt })
    }

    /// Rolls back everything standing between `key` and the state it
    /// validated against, and asks the owners' leaders to roll back too.
    fn evict_for(&mut self, key: &SubtxKey) -> Outgoing {
        let object = key.object.clone();
        let snapshot_head = self.records[key].snapshot_head;
        let mut out = Vec::new();

        for victim in self.write_set(&object) {
            if victim == *key {
                continue;
            }
            let in_chain = self.records.get(&victim).is_some_and(|r| r.in_chain);
            if in_chain {
                continue; // handled with the chain suffix below
            }
            if let Some(r) = self.forget(&victim) {
                self.close(&victim, r.attempt);
                self.stats.rollback_requests_sent += 1;
                out.push((
                    r.leader,
                    ProtocolMessage::ForceRollback {
                        key: victim,
                        attempt: r.attempt,
                    },
                ));
            }
        }

        let head_pos = snapshot_head.and_then(|h| self.chain.iter().position(|e| e.seq == h));
        if snapshot_head.is_some() && head_pos.is_none() {
            return out;
        }
        let first_victim = self
            .chain
            .iter()
            .enumerate()
            .skip(head_pos.map_or(0, |p| p + 1))
            .find(|(_, e)| e.subtx.object == object && e.subtx.is_write() && e.subtx.parent != key.tx)
            .map(|(i, _)| i);
        if let Some(start) = first_victim {
            for e in self.rollback_suffix(start, Some(key.tx)) {
                self.stats.rollback_requests_sent += 1;
                out.push((
                    e.leader,
                    ProtocolMessage::ForceRollback {
                        key: e.subtx.key(),
                        attempt: e.attempt,
                    },
                ));
            }
        }
        out
    }

    fn append_tentative(&mut self, key: &SubtxKey) {
        let rec = self.records.get_mut(key).expect("live record");
        rec.in_chain = true;
        let slot = self.store.get_mut(&key.object).expect("object exists");
        slot.balance += rec.subtx.delta();
        debug_assert!(slot.balance >= 0, "{key} overdraws {}", key.object);
        self.chain.push(ChainEntry {
            seq: self.next_seq,
            subtx: rec.subtx.clone(),
            attempt: rec.attempt,
            leader: rec.leader,
            status: EntryStatus::Tentative,
            snapshot_version: slot.version,
            resulting_version: None,
        });
        self.next_seq += 1;
    }

    /// Phase 4, abort branch: clean up and acknowledge.
    pub fn phase4_abort(&mut self, from: ShardId, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        let leader = match self.records.get(key) {
            Some(r) if r.attempt == attempt => {
                debug_assert!(!r.in_chain, "aborting an appended fragment");
                let leader = r.leader;
                self.forget(key);
                leader
            }
            _ => from,
        };
        self.close(key, attempt);
        vec![(leader, ProtocolMessage::Aborted { key: key.clone(), attempt })]
    }

    /// Phase 6, release: a writer creates the next version; the fragment
    /// leaves R and W.
    pub fn phase6_release(&mut self, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        if !self.live_record(key, attempt) {
            debug_assert!(
                self.is_closed(key, attempt),
                "{}: release for {key} without a tentative entry",
                self.shard_id
            );
            self.stats.stale_dropped += 1;
            return Vec::new();
        }
        let rec = self.forget(key).expect("live");
        assert!(rec.in_chain, "release of {key} before it was appended");
        let pos = self
            .chain
            .iter()
            .rposition(|e| e.subtx.key() == *key)
            .expect("appended fragment is in the chain");
        let entry = &mut self.chain[pos];
        assert_eq!(entry.status, EntryStatus::Tentative, "double release of {key}");
        entry.status = EntryStatus::Released;
        if rec.subtx.is_write() {
            let slot = self.store.get_mut(&key.object).expect("object");
            slot.released += rec.subtx.delta();
            slot.version += 1;
            slot.head = Some(entry.seq);
            entry.resulting_version = Some(slot.version);
        }
        vec![(rec.leader, ProtocolMessage::Released { key: key.clone(), attempt })]
    }

    /// Phase 6, restart: undo the provisional delta, drop the tentative entry
    /// and leave R and W.
    pub fn phase6_restart(&mut self, from: ShardId, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        let mut leader = from;
        if self.live_record(key, attempt) {
            let rec = self.forget(key).expect("live");
            leader = rec.leader;
            if rec.in_chain {
                let pos = self
                    .chain
                    .iter()
                    .rposition(|e| e.subtx.key() == *key)
                    .expect("appended fragment is in the chain");
                let entry = self.chain.remove(pos);
                assert_eq!(entry.status, EntryStatus::Tentative, "restart of released {key}");
                self.store.get_mut(&key.object).expect("object").balance -= entry.subtx.delta();
            }
        }
        self.close(key, attempt);
        vec![(leader, ProtocolMessage::Restarted { key: key.clone(), attempt })]
    }

    /// Removes the rollback suffix starting at chain position `start`,
    /// undoing entries newest first. Entries of `spare` are kept in place.
    /// Returns the removed entries in chain order.
    fn rollback_suffix(&mut self, start: usize, spare: Option<TxId>) -> Vec<ChainEntry> {
        let anchor = self.chain[start].subtx.object.clone();
        let scope = self.scope;
        let in_z = |i: usize, e: &ChainEntry| {
            i >= start
                && Some(e.subtx.parent) != spare
                && (scope == RollbackScope::ShardSuffix || e.subtx.object == anchor)
        };
        let mut removed = Vec::new();
        let mut kept = Vec::with_capacity(self.chain.len());
        for (i, e) in std::mem::take(&mut self.chain).into_iter().enumerate() {
            if in_z(i, &e) {
                removed.push(e);
            } else {
                kept.push(e);
            }
        }
        self.chain = kept;
        let mut touched = BTreeSet::new();
        for e in removed.iter().rev() {
            let slot = self.store.get_mut(&e.subtx.object).expect("object");
            let d = e.subtx.delta();
            match e.status {
                EntryStatus::Released if e.subtx.is_write() => {
                    slot.released -= d;
                    slot.balance -= d;
                    slot.version -= 1;
                }
                EntryStatus::Released => {}
                EntryStatus::Tentative => slot.balance -= d,
            }
            touched.insert(e.subtx.object.clone());
            let key = e.subtx.key();
            if self.live_record(&key, e.attempt) {
                self.forget(&key);
            }
            self.close(&key, e.attempt);
            self.stats.entries_undone += 1;
        }
        for object in touched {
            let head = self
                .chain
                .iter()
                .rev()
                .find(|e| e.subtx.object == object && e.status == EntryStatus::Released && e.subtx.is_write())
                .map(|e| e.seq);
            self.store.get_mut(&object).expect("object").head = head;
        }
        removed
    }

    /// Forced rollback of fragment `key`: leave R and W, remove the chain
    /// suffix starting at its entry, acknowledge to the leader and ask the
    /// leaders of every other removed fragment to roll back as well.
    pub fn handle_force_rollback(&mut self, from: ShardId, key: &SubtxKey, attempt: Attempt) -> Outgoing {
        let mut out = Vec::new();
        let mut leader = from;
        if let Some(rec) = self.records.get(key).filter(|r| r.attempt == attempt) {
            leader = rec.leader;
            if !rec.in_chain {
                self.forget(key);
            }
        }
        if let Some(pos) = self
            .chain
            .iter()
            .position(|e| e.subtx.key() == *key && e.attempt == attempt)
        {
            leader = self.chain[pos].leader;
            for e in self.rollback_suffix(pos, None) {
                if e.subtx.key() == *key {
                    continue;
                }
                self.stats.rollback_requests_sent += 1;
                out.push((
                    e.leader,
                    ProtocolMessage::ForceRollback {
                        key: e.subtx.key(),
                        attempt: e.attempt,
                    },
                ));
            }
        }
        self.close(key, attempt);
        out.push((leader, ProtocolMessage::Rollbacked { key: key.clone(), attempt }));
        out
    }

    /// Records the sender's latest lowest id and recomputes the minimum.
    pub fn update_lowest(&mut self, from: ShardId, lowest: Option<TxId>) {
        self.latest_gossip.insert(from, lowest);
        self.lowest_known = self.latest_gossip.values().flatten().min().copied();
    }

    /// Checks the structural invariants: W ⊆ R, every R member has a
    /// record, provisional balances match tentative entries, and released
    /// write versions on each object run 1, 2, 3, ... in chain order.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (obj, w) in &self.write_sets {
            let r = self.read_sets.get(obj).cloned().unwrap_or_default();
            if !w.is_subset(&r) {
                return Err(format!("W({obj}) not a subset of R({obj})"));
            }
        }
        for r in self.read_sets.values() {
            for k in r {
                if !self.records.contains_key(k) {
                    return Err(format!("{k} in R without a snapshot"));
                }
            }
        }
        let mut next_version: BTreeMap<&AccountId, u64> = BTreeMap::new();
        let mut provisional: BTreeMap<&AccountId, i64> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for e in &self.chain {
            if !seen.insert(e.subtx.key()) {
                return Err(format!("{} appears twice in the chain", e.subtx.key()));
            }
            match e.status {
                EntryStatus::Released if e.subtx.is_write() => {
                    let v = next_version.entry(&e.subtx.object).or_insert(0);
                    *v += 1;
                    if e.resulting_version != Some(*v) {
                        return Err(format!(
                            "{}: version {:?} where {} expected",
                            e.subtx.key(),
                            e.resulting_version,
                            v
                        ));
                    }
                }
                EntryStatus::Tentative => {
                    *provisional.entry(&e.subtx.object).or_insert(0) += e.subtx.delta();
                }
                EntryStatus::Released => {}
            }
        }
        for (id, slot) in &self.store {
            let v = next_version.get(id).copied().unwrap_or(0);
            if slot.version != v {
                return Err(format!("{id}: version {} but {v} released writes", slot.version));
            }
            let p = provisional.get(id).copied().unwrap_or(0);
            if slot.balance != slot.released + p {
                return Err(format!("{id}: provisional balance out of sync"));
            }
            if slot.released < 0 {
                return Err(format!("{id}: negative released balance {}", slot.released));
            }
        }
        Ok(())
    }
}
