//! Domain types shared by the protocol, the baselines, the workload generator
//! and the verifier.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulated milliseconds.
pub type SimTime = u64;

/// Index of a shard, `0..shard_count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShardId(pub u32);

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// Globally ordered transaction identifier.
///
/// Ordering is lexicographic on `(timestamp, origin_node, seq)`, so an older
/// transaction always has the smaller id and therefore the higher priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId {
    #[serde(rename = "ts")]
    pub timestamp: SimTime,
    #[serde(rename = "node")]
    pub origin_node: u32,
    pub seq: u32,
}

impl TxId {
    pub const fn new(timestamp: SimTime, origin_node: u32, seq: u32) -> Self {
        Self {
            timestamp,
            origin_node,
            seq,
        }
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}.{}.{}", self.timestamp, self.origin_node, self.seq)
    }
}

/// Timing and membership parameters of the sharded system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardConfig {
    pub shard_count: u32,
    pub nodes_per_shard: u32,
    pub byzantine_per_shard: u32,
    /// Upper bound on message delay.
    pub delta1: SimTime,
    /// Period of the lowest-id gossip.
    pub delta2: SimTime,
    /// Delay of one intra-shard consensus decision.
    pub delta3: SimTime,
    /// Lower bound on message delay.
    pub delta_min: SimTime,
    /// Clock-skew constant. With a single simulated clock it has no effect on
    /// id generation; it only enters the liveness bound.
    pub c: u64,
}

impl Default for ShardConfig {
    fn default() -> Self {
        Self {
            shard_count: 4,
            nodes_per_shard: 4,
            byzantine_per_shard: 1,
            delta1: 5,
            delta2: 50,
            delta3: 30,
            delta_min: 1,
            c: 1,
        }
    }
}

impl ShardConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.shard_count < 1 {
            return bad("shard_count must be at least 1".into());
        }
        if self.nodes_per_shard <= 3 * self.byzantine_per_shard {
            return bad(format!(
                "nodes_per_shard ({}) must exceed 3 * byzantine_per_shard ({})",
                self.nodes_per_shard, self.byzantine_per_shard
            ));
        }
        if self.delta1 == 0 || self.delta2 == 0 {
            return bad("delta1 and delta2 must be positive".into());
        }
        if self.delta_min == 0 || self.delta_min > self.delta1 {
            return bad(format!(
                "delta_min ({}) must lie in 1..=delta1 ({})",
                self.delta_min, self.delta1
            ));
        }
        Ok(())
    }
}

/// Name of an account (a shared object).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccountId(pub String);

impl AccountId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AccountId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Maps every account to exactly one home shard.
///
/// The default rule is a stable FNV-1a hash of the name modulo the shard
/// count. Explicit pins take precedence, which lets fixtures place named
/// accounts on named shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    shard_count: u32,
    pins: BTreeMap<AccountId, ShardId>,
}

impl Partition {
    pub fn new(shard_count: u32) -> Self {
        assert!(shard_count >= 1, "partition needs at least one shard");
        Self {
            shard_count,
            pins: BTreeMap::new(),
        }
    }

    pub fn with_pins(
        shard_count: u32,
        pins: impl IntoIterator<Item = (AccountId, ShardId)>,
    ) -> Self {
        let mut p = Self::new(shard_count);
        for (account, shard) in pins {
            assert!(shard.0 < shard_count, "pinned shard {shard} out of range");
            p.pins.insert(account, shard);
        }
        p
    }

    pub fn shard_count(&self) -> u32 {
        self.shard_count
    }

    pub fn shard_of(&self, account: &AccountId) -> ShardId {
        if let Some(s) = self.pins.get(account) {
            return *s;
        }
        ShardId((fnv1a(account.as_str().as_bytes()) % u64::from(self.shard_count)) as u32)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// An account as seen through a snapshot query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionedObject {
    pub id: AccountId,
    pub balance: i64,
    pub version: u64,
}

impl VersionedObject {
    pub fn new(id: AccountId, balance: i64) -> Self {
        Self {
            id,
            balance,
            version: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Ge => ">=",
            Comparator::Le => "<=",
            Comparator::Eq => "=",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    #[serde(rename = "acct")]
    pub account: AccountId,
    #[serde(rename = "cmp")]
    pub comparator: Comparator,
    #[serde(rename = "amt")]
    pub amount: i64,
}

impl Condition {
    pub fn new(account: impl Into<AccountId>, comparator: Comparator, amount: i64) -> Self {
        Self {
            account: account.into(),
            comparator,
            amount,
        }
    }

    pub fn at_least(account: impl Into<AccountId>, amount: i64) -> Self {
        Self::new(account, Comparator::Ge, amount)
    }

    /// Evaluates the condition against a bare balance.
    pub fn holds(&self, balance: i64) -> bool {
        match self.comparator {
            Comparator::Ge => balance >= self.amount,
            Comparator::Le => balance <= self.amount,
            Comparator::Eq => balance == self.amount,
        }
    }
}

impl From<String> for AccountId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Evaluates `cond` against the object it names.
///
/// Passing an object other than the one the condition references is a
/// programming error and panics.
pub fn evaluate_condition(cond: &Condition, obj: &VersionedObject) -> bool {
    assert_eq!(
        cond.account, obj.id,
        "condition on {} evaluated against {}",
        cond.account, obj.id
    );
    cond.holds(obj.balance)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Update {
    #[serde(rename = "acct")]
    pub account: AccountId,
    pub delta: i64,
}

impl Update {
    pub fn new(account: impl Into<AccountId>, delta: i64) -> Self {
        Self {
            account: account.into(),
            delta,
        }
    }
}

/// A conditional multi-account transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxId,
    #[serde(rename = "leader")]
    pub leader_shard: ShardId,
    pub conditions: Vec<Condition>,
    pub updates: Vec<Update>,
}

impl Transaction {
    /// Distinct accounts in order of first reference (conditions first).
    pub fn accounts(&self) -> Vec<AccountId> {
        let mut seen = Vec::<AccountId>::new();
        let refs = self
            .conditions
            .iter()
            .map(|c| &c.account)
            .chain(self.updates.iter().map(|u| &u.account));
        for a in refs {
            if !seen.contains(a) {
                seen.push(a.clone());
            }
        }
        seen
    }

    /// Sum of all update deltas; zero for a pure transfer.
    pub fn net_delta(&self) -> i64 {
        self.updates.iter().map(|u| u.delta).sum()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("transaction serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// The fragment of a transaction executed on one object of one shard.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subtransaction {
    pub parent: TxId,
    pub shard: ShardId,
    pub object: AccountId,
    pub conditions: Vec<Condition>,
    pub update: Option<Update>,
}

impl Subtransaction {
    pub fn key(&self) -> SubtxKey {
        SubtxKey {
            tx: self.parent,
            object: self.object.clone(),
        }
    }

    pub fn is_write(&self) -> bool {
        self.update.is_some()
    }

    pub fn delta(&self) -> i64 {
        self.update.as_ref().map_or(0, |u| u.delta)
    }

    /// True iff every condition holds at `balance` and the update would not
    /// overdraw the account.
    pub fn admissible_at(&self, balance: i64) -> bool {
        self.conditions.iter().all(|c| c.holds(balance)) && balance + self.delta() >= 0
    }
}

/// Identity of a subtransaction: one object per subtransaction, so the
/// parent id and object name are enough.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubtxKey {
    pub tx: TxId,
    pub object: AccountId,
}

impl fmt::Display for SubtxKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.tx, self.object)
    }
}

/// Splits `tx` into one subtransaction per distinct referenced account.
///
/// Each fragment carries every condition on its account and the net update
/// (summed deltas) on that account. A net delta of zero is dropped, leaving a
/// read-only fragment.
pub fn split(tx: &Transaction, partition: &Partition) -> Result<Vec<Subtransaction>> {
    let accounts = tx.accounts();
    if accounts.is_empty() {
        return Err(Error::EmptyTransaction(tx.id));
    }
    Ok(accounts
        .into_iter()
        .map(|account| {
            let conditions = tx
                .conditions
                .iter()
                .filter(|c| c.account == account)
                .cloned()
                .collect();
            let net: i64 = tx
                .updates
                .iter()
                .filter(|u| u.account == account)
                .map(|u| u.delta)
                .sum();
            let touched = tx.updates.iter().any(|u| u.account == account);
            Subtransaction {
                parent: tx.id,
                shard: partition.shard_of(&account),
                update: (touched && net != 0).then(|| Update::new(account.clone(), net)),
                object: account,
                conditions,
            }
        })
        .collect())
}

/// Destination shards `S(T)` of a split transaction, ascending.
pub fn destination_shards(subtxs: &[Subtransaction]) -> Vec<ShardId> {
    let mut shards: Vec<ShardId> = subtxs.iter().map(|s| s.shard).collect();
    shards.sort();
    shards.dedup();
    shards
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn example1_partition() -> Partition {
        Partition::with_pins(
            4,
            [
                ("Rock".into(), ShardId(0)),
                ("Asma".into(), ShardId(1)),
                ("Mark".into(), ShardId(2)),
                ("Bob".into(), ShardId(3)),
            ],
        )
    }

    fn t1() -> Transaction {
        Transaction {
            id: TxId::new(1, 0, 0),
            leader_shard: ShardId(0),
            conditions: vec![
                Condition::at_least("Rock", 3000),
                Condition::at_least("Asma", 500),
                Condition::at_least("Mark", 200),
            ],
            updates: vec![Update::new("Rock", -2000), Update::new("Asma", 2000)],
        }
    }

    #[test]
    fn split_example_one() {
        let subs = split(&t1(), &example1_partition()).unwrap();
        assert_eq!(subs.len(), 3);
        assert_eq!(subs[0].object.as_str(), "Rock");
        assert_eq!(subs[0].conditions, vec![Condition::at_least("Rock", 3000)]);
        assert_eq!(subs[0].delta(), -2000);
        assert_eq!(subs[1].object.as_str(), "Asma");
        assert_eq!(subs[1].delta(), 2000);
        assert_eq!(subs[2].object.as_str(), "Mark");
        assert!(subs[2].update.is_none());
        assert_eq!(
            destination_shards(&subs),
            vec![ShardId(0), ShardId(1), ShardId(2)]
        );
    }

    #[test]
    fn split_example_two() {
        let t2 = Transaction {
            id: TxId::new(2, 1, 0),
            leader_shard: ShardId(1),
            conditions: vec![Condition::at_least("Asma", 5000)],
            updates: vec![Update::new("Asma", -500), Update::new("Bob", 500)],
        };
        let subs = split(&t2, &example1_partition()).unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].object.as_str(), "Asma");
        assert_eq!(subs[0].delta(), -500);
        assert_eq!(subs[1].object.as_str(), "Bob");
        assert!(subs[1].conditions.is_empty());
        assert_eq!(subs[1].delta(), 500);
        assert_eq!(subs[1].shard, ShardId(3));
    }

    #[test]
    fn split_single_read_only() {
        let tx = Transaction {
            id: TxId::new(0, 0, 0),
            leader_shard: ShardId(0),
            conditions: vec![Condition::at_least("X", 10)],
            updates: vec![],
        };
        let subs = split(&tx, &Partition::new(2)).unwrap();
        assert_eq!(subs.len(), 1);
        assert!(subs[0].update.is_none());
    }

    #[test]
    fn split_rejects_empty() {
        let tx = Transaction {
            id: TxId::new(0, 0, 0),
            leader_shard: ShardId(0),
            conditions: vec![],
            updates: vec![],
        };
        assert!(matches!(
            split(&tx, &Partition::new(2)),
            Err(Error::EmptyTransaction(_))
        ));
    }

    #[test]
    fn split_merges_repeated_updates() {
        let tx = Transaction {
            id: TxId::new(0, 0, 0),
            leader_shard: ShardId(0),
            conditions: vec![Condition::at_least("A", 1), Condition::at_least("A", 5)],
            updates: vec![
                Update::new("A", -10),
                Update::new("B", 10),
                Update::new("A", -5),
                Update::new("C", 5),
            ],
        };
        let subs = split(&tx, &Partition::new(3)).unwrap();
        assert_eq!(subs.len(), 3);
        assert_eq!(subs[0].delta(), -15);
        // Duplicate conditions are kept and evaluated as a conjunction.
        assert_eq!(subs[0].conditions.len(), 2);
        assert!(!subs[0].admissible_at(3));
        assert!(subs[0].admissible_at(15));
    }

    #[test]
    fn evaluate_condition_examples() {
        let rock = VersionedObject::new("Rock".into(), 3000);
        assert!(evaluate_condition(&Condition::at_least("Rock", 3000), &rock));
        let x = VersionedObject::new("X".into(), 0);
        assert!(evaluate_condition(&Condition::at_least("X", 0), &x));
        let asma = VersionedObject::new("Asma".into(), 2500);
        assert!(!evaluate_condition(&Condition::at_least("Asma", 5000), &asma));
        assert!(evaluate_condition(
            &Condition::new("Asma", Comparator::Le, 2500),
            &asma
        ));
        assert!(evaluate_condition(
            &Condition::new("Asma", Comparator::Eq, 2500),
            &asma
        ));
    }

    #[test]
    #[should_panic(expected = "evaluated against")]
    fn evaluate_condition_account_mismatch_panics() {
        let obj = VersionedObject::new("B".into(), 1);
        evaluate_condition(&Condition::at_least("A", 0), &obj);
    }

    #[test]
    fn json_line_shape() {
        let line = t1().to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["id"]["ts"], 1);
        assert_eq!(v["leader"], 0);
        assert_eq!(v["conditions"][0]["cmp"], ">=");
        assert_eq!(v["updates"][1]["acct"], "Asma");
        assert_eq!(Transaction::from_json_line(&line).unwrap(), t1());
    }

    #[test]
    fn config_validation() {
        assert!(ShardConfig::default().validate().is_ok());
        let bad = ShardConfig {
            nodes_per_shard: 3,
            byzantine_per_shard: 1,
            ..ShardConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ShardConfig {
            shard_count: 0,
            ..ShardConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn arb_txid() -> impl Strategy<Value = TxId> {
        (0u64..5, 0u32..3, 0u32..3).prop_map(|(t, n, s)| TxId::new(t, n, s))
    }

    proptest! {
        #[test]
        fn txid_order_is_strict_total(a in arb_txid(), b in arb_txid(), c in arb_txid()) {
            // totality / antisymmetry
            prop_assert_eq!(a == b, a.cmp(&b).is_eq());
            prop_assert_eq!(a < b, b > a);
            prop_assert!(!(a < b && b < a));
            if a < b && b < c {
                prop_assert!(a < c);
            }
            prop_assert_eq!(
                a.cmp(&b),
                (a.timestamp, a.origin_node, a.seq).cmp(&(b.timestamp, b.origin_node, b.seq))
            );
        }

        #[test]
        fn partition_is_deterministic(name in "[a-z]{1,8}", shards in 1u32..32) {
            let p = Partition::new(shards);
            let a = AccountId::new(name);
            prop_assert_eq!(p.shard_of(&a), Partition::new(shards).shard_of(&a));
            prop_assert!(p.shard_of(&a).0 < shards);
        }

        #[test]
        fn split_is_lossless(
            amounts in proptest::collection::vec((0usize..6, -50i64..50), 1..8)
        ) {
            let names = ["a", "b", "c", "d", "e", "f"];
            let updates: Vec<Update> =
                amounts.iter().map(|(i, d)| Update::new(names[*i], *d)).collect();
            let tx = Transaction {
                id: TxId::new(0, 0, 0),
                leader_shard: ShardId(0),
                conditions: vec![],
                updates,
            };
            let p = Partition::new(3);
            let subs = split(&tx, &p).unwrap();
            let total: i64 = subs.iter().map(|s| s.delta()).sum();
            prop_assert_eq!(total, tx.net_delta());
            for s in &subs {
                prop_assert_eq!(s.shard, p.shard_of(&s.object));
                if let Some(u) = &s.update {
                    prop_assert_eq!(&u.account, &s.object);
                }
            }
            let mut objs: Vec<_> = subs.iter().map(|s| s.object.clone()).collect();
            objs.dedup();
            prop_assert_eq!(objs.len(), subs.len());
        }

        #[test]
        fn transaction_json_roundtrip(ts in 0u64..1000, node in 0u32..8, amt in 1i64..500) {
            let tx = Transaction {
                id: TxId::new(ts, node, 3),
                leader_shard: ShardId(node % 4),
                conditions: vec![Condition::at_least("aa", amt), Condition::new("bb", Comparator::Le, 9)],
                updates: vec![Update::new("aa", -amt), Update::new("bb", amt)],
            };
            prop_assert_eq!(Transaction::from_json_line(&tx.to_json_line()).unwrap(), tx);
        }
    }
}
