//! Randomized transfer workloads and small hand-built fixtures.
//!
//! File format: line-delimited JSON, one `{"type":"account",...}` line per
//! account followed by one `{"type":"tx",...}` line per transaction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AccountId, Condition, Partition, ShardId, SimTime, Transaction, TxId, Update};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountSpec {
    pub id: AccountId,
    pub balance: i64,
    /// Fixed placement, overriding the hash partition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard: Option<ShardId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Workload {
    pub accounts: Vec<AccountSpec>,
    /// Arrival time of each transaction is its id's timestamp.
    pub transactions: Vec<Transaction>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Account(AccountSpec),
    Tx(Transaction),
}

impl Workload {
    pub fn total_balance(&self) -> i64 {
        self.accounts.iter().map(|a| a.balance).sum()
    }

    pub fn initial_balances(&self) -> BTreeMap<AccountId, i64> {
        self.accounts.iter().map(|a| (a.id.clone(), a.balance)).collect()
    }

    pub fn partition(&self, shard_count: u32) -> Partition {
        Partition::with_pins(
            shard_count,
            self.accounts
                .iter()
                .filter_map(|a| a.shard.map(|s| (a.id.clone(), s))),
        )
    }

    /// Reassigns leaders round-robin over `shard_count` shards in id order.
    pub fn with_leaders(mut self, shard_count: u32) -> Self {
        let mut order: Vec<usize> = (0..self.transactions.len()).collect();
        order.sort_by_key(|&i| self.transactions[i].id);
        for (n, i) in order.into_iter().enumerate() {
            self.transactions[i].leader_shard = ShardId((n as u32) % shard_count);
        }
        self
    }

    /// Checks ids are unique, accounts exist and are distinct, and leaders
    /// and pins fall inside `shard_count`.
    pub fn validate(&self, shard_count: u32) -> Result<()> {
        let mut ids = BTreeSet::new();
        for a in &self.accounts {
            if !ids.insert(&a.id) {
                return Err(Error::InvalidWorkload(format!("duplicate account {}", a.id)));
            }
            if a.balance < 0 {
                return Err(Error::InvalidWorkload(format!("{} starts negative", a.id)));
            }
            if a.shard.is_some_and(|s| s.0 >= shard_count) {
                return Err(Error::InvalidWorkload(format!("{} pinned outside {shard_count} shards", a.id)));
            }
        }
        let mut txs = BTreeSet::new();
        for tx in &self.transactions {
            if !txs.insert(tx.id) {
                return Err(Error::InvalidWorkload(format!("duplicate transaction id {}", tx.id)));
            }
            if tx.leader_shard.0 >= shard_count {
                return Err(Error::InvalidWorkload(format!(
                    "{} led by {} but only {shard_count} shards",
                    tx.id, tx.leader_shard
                )));
            }
            if let Some(acct) = tx.accounts().into_iter().find(|a| !ids.contains(a)) {
                return Err(Error::InvalidWorkload(format!("{} references unknown {acct}", tx.id)));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for a in &self.accounts {
            serde_json::to_writer(&mut w, &Line::Account(a.clone()))?;
            w.write_all(b"\n")?;
        }
        for tx in &self.transactions {
            serde_json::to_writer(&mut w, &Line::Tx(tx.clone()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut wl = Workload::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidWorkload(format!("line {}: {e}", n + 1)))?;
            match parsed {
                Line::Account(a) => wl.accounts.push(a),
                Line::Tx(tx) => wl.transactions.push(tx),
            }
        }
        Ok(wl)
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn from_jsonl_str(s: &str) -> Result<Self> {
        Self::read_jsonl(s.as_bytes())
    }
}

/// Parameters of a generated workload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub accounts: usize,
    pub balance: i64,
    pub txs: usize,
    pub constraints: usize,
    pub seed: u64,
    pub shards: u32,
    pub arrival_interval_ms: SimTime,
    pub max_amount: i64,
    /// Make every extra constraint unsatisfiable.
    pub failing_constraints: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            accounts: 1000,
            balance: 3000,
            txs: 1500,
            constraints: 4,
            seed: 1,
            shards: 4,
            arrival_interval_ms: 1,
            max_amount: 500,
            failing_constraints: false,
        }
    }
}

const NAME_LEN: usize = 6;
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `count` distinct random lowercase names with the same starting balance.
pub fn gen_accounts(count: usize, balance: i64, seed: u64) -> Vec<AccountSpec> {
    assert!(count >= 1, "at least one account");
    let mut rng = stream(seed, 0);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let name: String = (0..NAME_LEN)
            .map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char)
            .collect();
        if seen.insert(name.clone()) {
            out.push(AccountSpec {
                id: AccountId(name),
                balance,
                shard: None,
            });
        }
    }
    out
}

/// Random transfers between distinct accounts, each guarded by a
/// sufficient-balance check on the payer plus `constraints - 1` balance
/// checks on further distinct accounts.
///
/// Payer, payee and amount come from one stream and each transaction's
/// extra checks from its own, so varying `constraints` under a fixed seed
/// keeps the transfers and grows each condition list by appending.
pub fn gen_transactions(accounts: &[AccountSpec], p: &GenParams) -> Result<Vec<Transaction>> {
    if p.constraints < 1 {
        return Err(Error::InvalidWorkload("at least one constraint per transaction".into()));
    }
    if accounts.len() < p.constraints + 1 {
        return Err(Error::InvalidWorkload(format!(
            "{} constraints need {} accounts, have {}",
            p.constraints,
            p.constraints + 1,
            accounts.len()
        )));
    }
    if p.shards < 1 || p.max_amount < 1 {
        return Err(Error::InvalidWorkload("shards and max amount must be positive".into()));
    }
    let mut transfers = stream(p.seed, 1);
    let n = accounts.len();
    let mut out = Vec::with_capacity(p.txs);
    for i in 0..p.txs {
        let amount = transfers.gen_range(1..=p.max_amount);
        let a = transfers.gen_range(0..n);
        let b = (a + transfers.gen_range(1..n)) % n;
        let payer = &accounts[a].id;
        let payee = &accounts[b].id;
        let mut conditions = vec![Condition::at_least(payer.clone(), amount)];
        let mut extra = stream(p.seed, 2 + i as u64);
        let mut used = BTreeSet::from([a, b]);
        while conditions.len() < p.constraints {
            let c = extra.gen_range(0..n);
            let threshold = extra.gen_range(0..=3000);
            if !used.insert(c) {
                continue;
            }
            let acct = &accounts[c];
            let threshold = if p.failing_constraints {
                acct.balance + 1 + threshold
            } else {
                threshold.min(acct.balance)
            };
            conditions.push(Condition::at_least(acct.id.clone(), threshold));
        }
        out.push(Transaction {
            id: TxId::new(i as u64 * p.arrival_interval_ms, 0, i as u32),
            leader_shard: ShardId(i as u32 % p.shards),
            conditions,
            updates: vec![Update::new(payer.clone(), -amount), Update::new(payee.clone(), amount)],
        });
    }
    Ok(out)
}

pub fn generate(p: &GenParams) -> Result<Workload> {
    let accounts = gen_accounts(p.accounts, p.balance, p.seed);
    let transactions = gen_transactions(&accounts, p)?;
    Ok(Workload { accounts, transactions })
}

/// Hand-built scenarios with pinned placement.
pub mod fixtures {
    use super::*;

    fn pinned(id: &str, balance: i64, shard: u32) -> AccountSpec {
        AccountSpec {
            id: id.into(),
            balance,
            shard: Some(ShardId(shard)),
        }
    }

    /// "Transfer 2000 from Rock to Asma if Rock has 3000, Asma has 500 and
    /// Mark has 200", on three shards.
    pub fn example_one() -> Workload {
        Workload {
            accounts: vec![pinned("Rock", 3000, 0), pinned("Asma", 500, 1), pinned("Mark", 200, 2)],
            transactions: vec![transfer_one(TxId::new(0, 0, 1), ShardId(0))],
        }
    }

    fn transfer_one(id: TxId, leader: ShardId) -> Transaction {
        Transaction {
            id,
            leader_shard: leader,
            conditions: vec![
                Condition::at_least("Rock", 3000),
                Condition::at_least("Asma", 500),
                Condition::at_least("Mark", 200),
            ],
            updates: vec![Update::new("Rock", -2000), Update::new("Asma", 2000)],
        }
    }

    /// Example one's transfer plus "transfer 500 from Asma to Bob if Asma
    /// has 5000", both touching Asma. Asma starts at `asma` and the second
    /// transfer arrives `gap` ms after the first.
    pub fn example_two(asma: i64, gap: SimTime) -> Workload {
        Workload {
            accounts: vec![
                pinned("Rock", 3000, 0),
                pinned("Asma", asma, 1),
                pinned("Mark", 200, 2),
                pinned("Bob", 0, 3),
            ],
            transactions: vec![
                transfer_one(TxId::new(0, 0, 1), ShardId(0)),
                Transaction {
                    id: TxId::new(gap, 0, 2),
                    leader_shard: ShardId(3),
                    conditions: vec![Condition::at_least("Asma", 5000)],
                    updates: vec![Update::new("Asma", -500), Update::new("Bob", 500)],
                },
            ],
        }
    }

    /// `n` transactions on four shards, all moving money out of one hot
    /// account, each to a different payee. Arrivals are `gap` ms apart.
    pub fn hot_account(n: usize, gap: SimTime) -> Workload {
        let mut accounts = vec![pinned("hot", 1_000_000, 0)];
        let mut transactions = Vec::new();
        for i in 0..n {
            let payee = format!("p{i:03}");
            accounts.push(AccountSpec {
                id: payee.as_str().into(),
                balance: 0,
                shard: Some(ShardId(1 + (i as u32 % 3))),
            });
            transactions.push(Transaction {
                id: TxId::new(i as u64 * gap, 0, i as u32),
                leader_shard: ShardId(i as u32 % 4),
                conditions: vec![Condition::at_least("hot", 10)],
                updates: vec![Update::new("hot", -10), Update::new(payee.as_str(), 10)],
            });
        }
        Workload { accounts, transactions }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_sized_accounts() {
        let accts = gen_accounts(1000, 3000, 7);
        assert_eq!(accts.len(), 1000);
        assert!(accts.iter().all(|a| a.balance == 3000));
        let total: i64 = accts.iter().map(|a| a.balance).sum();
        assert_eq!(total, 3_000_000);
        let distinct: BTreeSet<_> = accts.iter().map(|a| &a.id).collect();
        assert_eq!(distinct.len(), 1000);
        assert!(accts
            .iter()
            .all(|a| a.id.as_str().len() == NAME_LEN && a.id.as_str().bytes().all(|b| b.is_ascii_lowercase())));
    }

    #[test]
    fn single_zero_account() {
        let accts = gen_accounts(1, 0, 3);
        assert_eq!(accts.len(), 1);
        assert_eq!(accts[0].balance, 0);
    }

    #[test]
    fn accounts_deterministic() {
        assert_eq!(gen_accounts(50, 3000, 11), gen_accounts(50, 3000, 11));
        assert_ne!(gen_accounts(50, 3000, 11), gen_accounts(50, 3000, 12));
    }

    #[test]
    fn paper_sized_transactions() {
        let wl = generate(&GenParams::default()).unwrap();
        assert_eq!(wl.transactions.len(), 1500);
        for tx in &wl.transactions {
            assert_eq!(tx.conditions.len(), 4);
            assert_eq!(tx.updates.len(), 2);
            assert_eq!(tx.net_delta(), 0);
            let amount = -tx.updates[0].delta;
            assert!((1..=500).contains(&amount));
            assert_eq!(tx.conditions[0], Condition::at_least(tx.updates[0].account.clone(), amount));
            let touched: BTreeSet<_> = tx.accounts().into_iter().collect();
            assert_eq!(touched.len(), 5, "{} touches repeated accounts", tx.id);
        }
        wl.validate(4).unwrap();
    }

    #[test]
    fn single_transfer_two_accounts() {
        let accounts = gen_accounts(2, 100, 1);
        let p = GenParams {
            txs: 1,
            constraints: 1,
            ..GenParams::default()
        };
        let txs = gen_transactions(&accounts, &p).unwrap();
        assert_eq!(txs.len(), 1);
        assert_eq!(txs[0].conditions.len(), 1);
        assert_ne!(txs[0].updates[0].account, txs[0].updates[1].account);
    }

    #[test]
    fn too_few_accounts_rejected() {
        let accounts = gen_accounts(3, 100, 1);
        let p = GenParams {
            constraints: 3,
            ..GenParams::default()
        };
        assert!(matches!(gen_transactions(&accounts, &p), Err(Error::InvalidWorkload(_))));
    }

    #[test]
    fn constraint_sweep_keeps_transfers_and_extends_conditions() {
        let accounts = gen_accounts(1000, 3000, 5);
        let runs: Vec<Vec<Transaction>> = (1..=8)
            .map(|k| {
                let p = GenParams {
                    txs: 200,
                    constraints: k,
                    seed: 5,
                    ..GenParams::default()
                };
                gen_transactions(&accounts, &p).unwrap()
            })
            .collect();
        for pair in runs.windows(2) {
            for (a, b) in pair[0].iter().zip(&pair[1]) {
                assert_eq!(a.id, b.id);
                assert_eq!(a.updates, b.updates);
                assert_eq!(a.leader_shard, b.leader_shard);
                assert_eq!(b.conditions.len(), a.conditions.len() + 1);
                assert_eq!(&b.conditions[..a.conditions.len()], &a.conditions[..]);
            }
        }
    }

    #[test]
    fn failing_constraints_exceed_balance() {
        let p = GenParams {
            accounts: 20,
            txs: 20,
            constraints: 3,
            failing_constraints: true,
            ..GenParams::default()
        };
        let wl = generate(&p).unwrap();
        for tx in &wl.transactions {
            assert!(tx.conditions[1..].iter().all(|c| c.amount > 3000));
        }
    }

    #[test]
    fn leaders_round_robin() {
        let wl = generate(&GenParams {
            txs: 32,
            ..GenParams::default()
        })
        .unwrap()
        .with_leaders(16);
        for (i, tx) in wl.transactions.iter().enumerate() {
            assert_eq!(tx.leader_shard, ShardId(i as u32 % 16));
        }
        wl.validate(16).unwrap();
        assert!(wl.validate(8).is_err());
    }

    #[test]
    fn fixtures_are_valid() {
        fixtures::example_one().validate(3).unwrap();
        fixtures::example_two(5000, 3).validate(4).unwrap();
        let hot = fixtures::hot_account(50, 1);
        hot.validate(4).unwrap();
        assert_eq!(hot.transactions.len(), 50);
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(seed in any::<u64>(), k in 1usize..6, fail in any::<bool>()) {
            let p = GenParams {
                accounts: 30,
                txs: 25,
                constraints: k,
                seed,
                failing_constraints: fail,
                ..GenParams::default()
            };
            let mut wl = generate(&p).unwrap();
            wl.accounts[0].shard = Some(ShardId(2));
            let text = wl.to_jsonl_string();
            prop_assert_eq!(Workload::from_jsonl_str(&text).unwrap(), wl);
        }

        #[test]
        fn generated_transfers_are_zero_sum(seed in any::<u64>()) {
            let wl = generate(&GenParams { accounts: 10, txs: 30, constraints: 2, seed, ..GenParams::default() }).unwrap();
            for tx in &wl.transactions {
                prop_assert_eq!(tx.updates[0].delta, -tx.updates[1].delta);
            }
        }
    }
}
