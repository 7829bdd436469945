//! Offline checks over released local chains: the causal relation, validity,
//! shard-coherence, a blockchain serialization and sequential replay.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use fixedbitset::FixedBitSet;
use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use crate::dest::{ChainDumpLine, ChainEntry, EntryStatus};
use crate::error::{Error, Result};
use crate::model::{AccountId, Partition, Transaction, TxId};
use crate::sim::RunOutput;
use crate::workload::Workload;

/// The part of a chain entry the verifier looks at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainFragment {
    pub tx: TxId,
    pub object: AccountId,
    pub is_write: bool,
    pub delta: i64,
}

pub type LocalChain = Vec<ChainFragment>;

/// Released entries of each shard's chain.
pub fn chains_from_entries(chains: &[Vec<ChainEntry>]) -> Vec<LocalChain> {
    chains
        .iter()
        .map(|c| {
            c.iter()
                .filter(|e| e.status == EntryStatus::Released)
                .map(|e| ChainFragment {
                    tx: e.subtx.parent,
                    object: e.subtx.object.clone(),
                    is_write: e.subtx.is_write(),
                    delta: e.subtx.delta(),
                })
                .collect()
        })
        .collect()
}

pub fn chains_from_dumps(dumps: &[Vec<ChainDumpLine>]) -> Vec<LocalChain> {
    dumps
        .iter()
        .map(|c| {
            c.iter()
                .filter(|l| l.status == EntryStatus::Released)
                .map(|l| ChainFragment {
                    tx: l.tx,
                    object: l.subtx_object.clone(),
                    is_write: l.result_v.is_some(),
                    delta: l.delta,
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Node {
    pub tx: TxId,
    pub shard: usize,
    pub pos: usize,
    pub object: AccountId,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@S{}[{}]:{}", self.tx, self.shard, self.pos, self.object)
    }
}

/// Fragments of committed transactions and the causal relation between
/// them, with its transitive closure.
#[derive(Debug, Clone)]
pub struct CausalGraph {
    pub nodes: Vec<Node>,
    /// Conflict edges inside one chain.
    pub base_edges: Vec<(usize, usize)>,
    /// Direct edges after lifting across chains, sorted and deduplicated.
    pub succ: Vec<Vec<usize>>,
    by_tx: BTreeMap<TxId, Vec<usize>>,
    closure: Vec<FixedBitSet>,
    scc_of: Vec<usize>,
    cyclic_sccs: Vec<Vec<usize>>,
}

impl CausalGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `a` causes `b` in the transitive closure.
    pub fn causes(&self, a: usize, b: usize) -> bool {
        self.closure[self.scc_of[a]].contains(b)
    }

    pub fn fragments_of(&self, tx: &TxId) -> &[usize] {
        self.by_tx.get(tx).map_or(&[], Vec::as_slice)
    }

    pub fn transactions(&self) -> impl Iterator<Item = &TxId> {
        self.by_tx.keys()
    }

    /// Some fragment of `a` causes some fragment of `b`.
    pub fn tx_causes(&self, a: &TxId, b: &TxId) -> bool {
        let targets = self.fragments_of(b);
        self.fragments_of(a)
            .iter()
            .any(|&u| targets.iter().any(|&v| self.causes(u, v)))
    }
}

/// Builds the causal relation: conflict edges within each chain, lifted to
/// the sibling fragments of both transactions, then closed transitively.
pub fn build_graph(chains: &[LocalChain]) -> Result<CausalGraph> {
    let mut nodes = Vec::new();
    let mut by_tx: BTreeMap<TxId, Vec<usize>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (shard, chain) in chains.iter().enumerate() {
        for (pos, f) in chain.iter().enumerate() {
            if !seen.insert((f.tx, f.object.clone())) {
                return Err(Error::MalformedChain(format!(
                    "fragment {}:{} appears twice (S{shard}[{pos}])",
                    f.tx, f.object
                )));
            }
            by_tx.entry(f.tx).or_default().push(nodes.len());
            nodes.push(Node {
                tx: f.tx,
                shard,
                pos,
                object: f.object.clone(),
            });
        }
    }

    let mut base_edges = Vec::new();
    let mut offset = 0;
    for chain in chains {
        let mut by_object: BTreeMap<&AccountId, Vec<usize>> = BTreeMap::new();
        for (pos, f) in chain.iter().enumerate() {
            by_object.entry(&f.object).or_default().push(pos);
        }
        for positions in by_object.values() {
            for (a, &i) in positions.iter().enumerate() {
                for &j in &positions[a + 1..] {
                    if chain[i].is_write || chain[j].is_write {
                        base_edges.push((offset + i, offset + j));
                    }
                }
            }
        }
        offset += chain.len();
    }

    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
    for &(u, v) in &base_edges {
        for &w in &by_tx[&nodes[v].tx] {
            succ[u].insert(w);
        }
        for &w in &by_tx[&nodes[u].tx] {
            succ[w].insert(v);
        }
    }
    let succ: Vec<Vec<usize>> = succ.into_iter().map(|s| s.into_iter().collect()).collect();

    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(nodes.len(), 0);
    for _ in 0..nodes.len() {
        g.add_node(());
    }
    for (u, vs) in succ.iter().enumerate() {
        for &v in vs {
            g.add_edge(NodeIndex::new(u), NodeIndex::new(v), ());
        }
    }
    // Components come out sinks first, so successors are always closed
    // before their predecessors.
    let sccs = tarjan_scc(&g);
    let mut scc_of = vec![0; nodes.len()];
    for (i, comp) in sccs.iter().enumerate() {
        for n in comp {
            scc_of[n.index()] = i;
        }
    }
    let mut closure: Vec<FixedBitSet> = Vec::with_capacity(sccs.len());
    let mut cyclic_sccs = Vec::new();
    for (i, comp) in sccs.iter().enumerate() {
        let mut reach = FixedBitSet::with_capacity(nodes.len());
        for n in comp {
            for &v in &succ[n.index()] {
                reach.insert(v);
                if scc_of[v] != i {
                    reach.union_with(&closure[scc_of[v]]);
                }
            }
        }
        if comp.len() > 1 {
            let mut members: Vec<usize> = comp.iter().map(|n| n.index()).collect();
            members.sort_unstable();
            cyclic_sccs.push(members);
        }
        closure.push(reach);
    }

    Ok(CausalGraph {
        nodes,
        base_edges,
        succ,
        by_tx,
        closure,
        scc_of,
        cyclic_sccs,
    })
}

/// `Ok` when no fragment causes itself; otherwise a shortest cyclic relation
/// path `a_1, ..., a_l` with `a_1 = a_l`.
pub fn check_valid(g: &CausalGraph) -> std::result::Result<(), Vec<Node>> {
    let Some(comp) = g.cyclic_sccs.first() else {
        return Ok(());
    };
    let start = comp[0];
    let inside: BTreeSet<usize> = comp.iter().copied().collect();
    let mut parent: BTreeMap<usize, usize> = BTreeMap::new();
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &v in &g.succ[u] {
            if !inside.contains(&v) {
                continue;
            }
            if v == start {
                let mut path = vec![start, u];
                let mut cur = u;
                while cur != start {
                    cur = parent[&cur];
                    path.push(cur);
                }
                path.reverse();
                return Err(path.into_iter().map(|i| g.nodes[i].clone()).collect());
            }
            if v != start && !parent.contains_key(&v) {
                parent.insert(v, u);
                queue.push_back(v);
            }
        }
    }
    unreachable!("a strongly connected component with two nodes has a cycle")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherenceViolation {
    /// `first` causes `second` ...
    pub first: TxId,
    pub second: TxId,
    /// ... yet `second` precedes `first` on this conflicting chain position.
    pub shard: usize,
    pub object: AccountId,
}

impl fmt::Display for CoherenceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} causes {} but S{} orders {} first on {}",
            self.first, self.second, self.shard, self.second, self.object
        )
    }
}

/// Every causally related pair of transactions is ordered the same way on
/// every shard where they conflict.
pub fn check_shard_coherence(g: &CausalGraph) -> std::result::Result<(), CoherenceViolation> {
    for &(u, v) in &g.base_edges {
        let (earlier, later) = (&g.nodes[u], &g.nodes[v]);
        if earlier.tx != later.tx && g.tx_causes(&later.tx, &earlier.tx) {
            return Err(CoherenceViolation {
                first: later.tx,
                second: earlier.tx,
                shard: earlier.shard,
                object: earlier.object.clone(),
            });
        }
    }
    Ok(())
}

/// Contracts each transaction to one node and sorts topologically, smallest
/// id first among the ready transactions. On a cycle, returns the
/// transactions that could not be placed.
pub fn serialize(g: &CausalGraph) -> std::result::Result<Vec<TxId>, Vec<TxId>> {
    let mut succ: BTreeMap<TxId, BTreeSet<TxId>> = g.by_tx.keys().map(|t| (*t, BTreeSet::new())).collect();
    for (u, vs) in g.succ.iter().enumerate() {
        for &v in vs {
            let (a, b) = (g.nodes[u].tx, g.nodes[v].tx);
            if a != b {
                succ.get_mut(&a).expect("known").insert(b);
            }
        }
    }
    let mut indegree: BTreeMap<TxId, usize> = succ.keys().map(|t| (*t, 0)).collect();
    for targets in succ.values() {
        for t in targets {
            *indegree.get_mut(t).expect("known") += 1;
        }
    }
    let mut ready: BTreeSet<TxId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(t, _)| *t).collect();
    let mut order = Vec::with_capacity(succ.len());
    while let Some(t) = ready.pop_first() {
        order.push(t);
        for next in &succ[&t] {
            let d = indegree.get_mut(next).expect("known");
            *d -= 1;
            if *d == 0 {
                ready.insert(*next);
            }
        }
    }
    if order.len() == succ.len() {
        Ok(order)
    } else {
        let placed: BTreeSet<TxId> = order.into_iter().collect();
        Err(succ.keys().filter(|t| !placed.contains(t)).copied().collect())
    }
}

/// Every causal edge goes forward in `order`.
pub fn respects(g: &CausalGraph, order: &[TxId]) -> bool {
    let rank: BTreeMap<TxId, usize> = order.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    g.succ.iter().enumerate().all(|(u, vs)| {
        vs.iter().all(|&v| {
            let (a, b) = (g.nodes[u].tx, g.nodes[v].tx);
            a == b || rank[&a] < rank[&b]
        })
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayViolation {
    pub tx: TxId,
    pub position: usize,
    pub reason: String,
}

impl fmt::Display for ReplayViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at position {}: {}", self.tx, self.position, self.reason)
    }
}

/// Executes `order` sequentially from `initial`. Every listed transaction
/// committed in the protocol, so each must find all its conditions true and
/// no update may overdraw; failures are reported and the transaction is
/// skipped.
pub fn oracle_replay(
    order: &[TxId],
    initial: &BTreeMap<AccountId, i64>,
    txs: &BTreeMap<TxId, Transaction>,
) -> (BTreeMap<AccountId, i64>, Vec<ReplayViolation>) {
    let mut state = initial.clone();
    let mut violations = Vec::new();
    for (position, id) in order.iter().enumerate() {
        let Some(tx) = txs.get(id) else {
            violations.push(ReplayViolation {
                tx: *id,
                position,
                reason: "not in the workload".into(),
            });
            continue;
        };
        let balance = |a: &AccountId| state.get(a).copied();
        let failed = tx.conditions.iter().find(|c| !balance(&c.account).is_some_and(|b| c.holds(b)));
        if let Some(c) = failed {
            violations.push(ReplayViolation {
                tx: *id,
                position,
                reason: format!(
                    "condition {} {} {} fails at balance {:?}",
                    c.account,
                    c.comparator,
                    c.amount,
                    balance(&c.account)
                ),
            });
            continue;
        }
        let mut next = state.clone();
        let mut overdraw = None;
        for u in &tx.updates {
            let b = next.entry(u.account.clone()).or_insert(0);
            *b += u.delta;
            if *b < 0 {
                overdraw = Some(u.account.clone());
            }
        }
        if let Some(acct) = overdraw {
            violations.push(ReplayViolation {
                tx: *id,
                position,
                reason: format!("update overdraws {acct}"),
            });
            continue;
        }
        state = next;
    }
    (state, violations)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub valid: bool,
    pub shard_coherent: bool,
    pub serialization: Vec<TxId>,
    pub replay_match: bool,
    pub violations: Vec<String>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.valid && self.shard_coherent && self.replay_match && self.violations.is_empty()
    }
}

/// Runs every check. `final_balances` are the simulator's end state; when
/// absent, the balances implied by the chains' released deltas stand in.
pub fn verify(
    chains: &[LocalChain],
    workload_txs: &[Transaction],
    initial: &BTreeMap<AccountId, i64>,
    final_balances: Option<&BTreeMap<AccountId, i64>>,
    partition: Option<&Partition>,
) -> VerificationReport {
    let mut violations = Vec::new();
    let g = match build_graph(chains) {
        Ok(g) => g,
        Err(e) => {
            return VerificationReport {
                valid: false,
                shard_coherent: false,
                serialization: Vec::new(),
                replay_match: false,
                violations: vec![e.to_string()],
            }
        }
    };
    let valid = match check_valid(&g) {
        Ok(()) => true,
        Err(cycle) => {
            let path: Vec<String> = cycle.iter().map(Node::to_string).collect();
            violations.push(format!("causal cycle: {}", path.join(" -> ")));
            false
        }
    };
    let shard_coherent = match check_shard_coherence(&g) {
        Ok(()) => true,
        Err(v) => {
            violations.push(format!("not shard-coherent: {v}"));
            false
        }
    };
    let txs: BTreeMap<TxId, Transaction> = workload_txs.iter().map(|t| (t.id, t.clone())).collect();
    for id in g.transactions() {
        let Some(tx) = txs.get(id) else { continue };
        let have: BTreeSet<&AccountId> = g.fragments_of(id).iter().map(|&i| &g.nodes[i].object).collect();
        let accounts = tx.accounts();
        let want: BTreeSet<&AccountId> = accounts.iter().collect();
        if have != want {
            violations.push(format!("{id} is only partially recorded"));
        }
        if let Some(p) = partition {
            for &i in g.fragments_of(id) {
                let n = &g.nodes[i];
                if p.shard_of(&n.object).0 as usize != n.shard {
                    violations.push(format!("{n} recorded on the wrong shard"));
                }
            }
        }
    }
    let serialization = match serialize(&g) {
        Ok(order) => {
            if !respects(&g, &order) {
                violations.push("serialization breaks a causal edge".into());
            }
            order
        }
        Err(stuck) => {
            violations.push(format!("no serialization; {} transactions on cycles", stuck.len()));
            Vec::new()
        }
    };
    let mut replay_match = false;
    if !serialization.is_empty() || g.is_empty() {
        let (replayed, failures) = oracle_replay(&serialization, initial, &txs);
        violations.extend(failures.iter().map(|f| format!("replay: {f}")));
        let expected = match final_balances {
            Some(b) => b.clone(),
            None => chain_balances(chains, initial),
        };
        let mismatched: Vec<&AccountId> = expected
            .keys()
            .chain(replayed.keys())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|a| expected.get(*a).copied().unwrap_or(0) != replayed.get(*a).copied().unwrap_or(0))
            .collect();
        if let Some(first) = mismatched.first() {
            violations.push(format!(
                "replay diverges on {} accounts, first {first}: run {:?} vs replay {:?}",
                mismatched.len(),
                expected.get(*first),
                replayed.get(*first)
            ));
        }
        replay_match = failures.is_empty() && mismatched.is_empty();
    }
    VerificationReport {
        valid,
        shard_coherent,
        serialization,
        replay_match,
        violations,
    }
}

/// Verifies a finished simulator run against the workload it executed.
pub fn verify_run(out: &RunOutput, workload: &Workload) -> VerificationReport {
    let partition = workload.partition(out.config.shards);
    verify(
        &chains_from_entries(&out.chains),
        &workload.transactions,
        &workload.initial_balances(),
        Some(&out.report.final_balances),
        Some(&partition),
    )
}

/// Initial balances plus every released write's delta.
pub fn chain_balances(chains: &[LocalChain], initial: &BTreeMap<AccountId, i64>) -> BTreeMap<AccountId, i64> {
    let mut out = initial.clone();
    for f in chains.iter().flatten().filter(|f| f.is_write) {
        *out.entry(f.object.clone()).or_insert(0) += f.delta;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Condition, ShardId, Update};
    use proptest::prelude::*;

    fn t(n: u64) -> TxId {
        TxId::new(n, 0, 0)
    }

    fn w(tx: u64, obj: &str) -> ChainFragment {
        ChainFragment {
            tx: t(tx),
            object: obj.into(),
            is_write: true,
            delta: 0,
        }
    }

    fn r(tx: u64, obj: &str) -> ChainFragment {
        ChainFragment {
            is_write: false,
            ..w(tx, obj)
        }
    }

    fn idx(g: &CausalGraph, tx: u64, obj: &str) -> usize {
        g.nodes
            .iter()
            .position(|n| n.tx == t(tx) && n.object.as_str() == obj)
            .unwrap()
    }

    #[test]
    fn disjoint_transactions_unrelated() {
        let g = build_graph(&[vec![w(1, "A")], vec![w(2, "B")]]).unwrap();
        assert!(g.base_edges.is_empty());
        assert!(g.succ.iter().all(Vec::is_empty));
        assert_eq!(serialize(&g).unwrap(), vec![t(1), t(2)]);
    }

    #[test]
    fn readers_do_not_conflict() {
        let g = build_graph(&[vec![r(1, "A"), r(2, "A")]]).unwrap();
        assert!(g.base_edges.is_empty());
    }

    #[test]
    fn example_two_edges_and_lifting() {
        // T1 touches Rock, Asma, Mark; T2 touches Asma, Bob. Asma's shard
        // commits T1 first.
        let chains = vec![
            vec![w(1, "Rock")],
            vec![w(1, "Asma"), w(2, "Asma")],
            vec![r(1, "Mark")],
            vec![w(2, "Bob")],
        ];
        let g = build_graph(&chains).unwrap();
        let (t1a, t2a, t2b, t1r, t1m) = (
            idx(&g, 1, "Asma"),
            idx(&g, 2, "Asma"),
            idx(&g, 2, "Bob"),
            idx(&g, 1, "Rock"),
            idx(&g, 1, "Mark"),
        );
        assert_eq!(g.base_edges, vec![(t1a, t2a)]);
        assert!(g.causes(t1a, t2b), "lifted to T2's sibling");
        assert!(g.causes(t1r, t2a), "lifted from T1's sibling");
        assert!(g.causes(t1m, t2a));
        assert!(!g.causes(t1r, t2b), "lifting is one-sided per edge");
        assert!(!g.causes(t2a, t1a));
        check_valid(&g).unwrap();
        check_shard_coherence(&g).unwrap();
        assert_eq!(serialize(&g).unwrap(), vec![t(1), t(2)]);
    }

    #[test]
    fn transitive_edge() {
        let chains = vec![vec![w(1, "A"), w(2, "A")], vec![w(2, "B"), w(3, "B")]];
        let g = build_graph(&chains).unwrap();
        assert!(g.causes(idx(&g, 1, "A"), idx(&g, 3, "B")));
        assert!(g.tx_causes(&t(1), &t(3)));
    }

    #[test]
    fn two_cycle_counterexample() {
        let chains = vec![vec![w(1, "A"), w(2, "A")], vec![w(2, "B"), w(1, "B")]];
        let g = build_graph(&chains).unwrap();
        let cycle = check_valid(&g).unwrap_err();
        assert_eq!(cycle.len(), 3);
        assert_eq!(cycle.first(), cycle.last());
        for pair in cycle.windows(2) {
            let (a, b) = (
                g.nodes.iter().position(|n| *n == pair[0]).unwrap(),
                g.nodes.iter().position(|n| *n == pair[1]).unwrap(),
            );
            assert!(g.succ[a].contains(&b));
        }
        assert!(check_shard_coherence(&g).is_err());
        assert!(serialize(&g).is_err());
    }

    #[test]
    fn opposite_orders_reported() {
        let chains = vec![vec![w(1, "A"), r(2, "A")], vec![w(2, "B"), w(1, "B")]];
        let g = build_graph(&chains).unwrap();
        let v = check_shard_coherence(&g).unwrap_err();
        assert!(v.first == t(1) || v.first == t(2));
    }

    #[test]
    fn duplicate_fragment_rejected() {
        let err = build_graph(&[vec![w(1, "A"), w(1, "A")]]).unwrap_err();
        assert!(matches!(err, Error::MalformedChain(_)));
    }

    #[test]
    fn empty_graph_is_valid() {
        let g = build_graph(&[]).unwrap();
        check_valid(&g).unwrap();
        check_shard_coherence(&g).unwrap();
        assert_eq!(serialize(&g).unwrap(), Vec::<TxId>::new());
    }

    fn example_one_tx() -> Transaction {
        Transaction {
            id: t(1),
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
    fn replay_example_one() {
        let initial = BTreeMap::from([("Rock".into(), 3000), ("Asma".into(), 500), ("Mark".into(), 200)]);
        let txs = BTreeMap::from([(t(1), example_one_tx())]);
        let (out, bad) = oracle_replay(&[t(1)], &initial, &txs);
        assert!(bad.is_empty());
        assert_eq!(out[&"Rock".into()], 1000);
        assert_eq!(out[&"Asma".into()], 2500);
        assert_eq!(out[&"Mark".into()], 200);
        let (same, _) = oracle_replay(&[], &initial, &txs);
        assert_eq!(same, initial);
    }

    #[test]
    fn replay_flags_failed_condition() {
        let initial = BTreeMap::from([("Rock".into(), 2999), ("Asma".into(), 500), ("Mark".into(), 200)]);
        let txs = BTreeMap::from([(t(1), example_one_tx())]);
        let (out, bad) = oracle_replay(&[t(1)], &initial, &txs);
        assert_eq!(bad.len(), 1);
        assert_eq!(out, initial);
    }

    /// Random chain systems over at most eight transactions: each shard
    /// orders the fragments placed on it arbitrarily.
    fn chain_system() -> impl Strategy<Value = Vec<LocalChain>> {
        let objects = ["A", "B", "C", "D", "E", "F"];
        (2usize..=8, any::<u64>()).prop_map(move |(n, seed)| {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut per_shard: Vec<LocalChain> = vec![Vec::new(); 3];
            for tx in 0..n as u64 {
                let mut objs = objects.to_vec();
                objs.shuffle(&mut rng);
                for obj in objs.iter().take(rng.gen_range(1..=3)) {
                    let shard = (obj.as_bytes()[0] - b'A') as usize % 3;
                    let f = if rng.gen_bool(0.6) { w(tx, obj) } else { r(tx, obj) };
                    per_shard[shard].push(f);
                }
            }
            for chain in &mut per_shard {
                chain.shuffle(&mut rng);
            }
            per_shard
        })
    }

    fn brute_force_order_exists(chains: &[LocalChain]) -> bool {
        let mut txs: BTreeSet<TxId> = BTreeSet::new();
        let mut must: Vec<(TxId, TxId)> = Vec::new();
        for chain in chains {
            for (i, a) in chain.iter().enumerate() {
                txs.insert(a.tx);
                for b in &chain[i + 1..] {
                    if a.object == b.object && (a.is_write || b.is_write) {
                        must.push((a.tx, b.tx));
                    }
                }
            }
        }
        let txs: Vec<TxId> = txs.into_iter().collect();
        fn permute(k: usize, v: &mut Vec<TxId>, ok: &dyn Fn(&[TxId]) -> bool) -> bool {
            if k == v.len() {
                return ok(v);
            }
            for i in k..v.len() {
                v.swap(k, i);
                if permute(k + 1, v, ok) {
                    return true;
                }
                v.swap(k, i);
            }
            false
        }
        let ok = |order: &[TxId]| {
            let rank: BTreeMap<TxId, usize> = order.iter().enumerate().map(|(i, t)| (*t, i)).collect();
            must.iter().all(|(a, b)| rank[a] < rank[b])
        };
        permute(0, &mut txs.clone(), &ok)
    }

    /// Boolean matrix closure of the direct edges.
    fn matrix_closure(g: &CausalGraph) -> Vec<Vec<bool>> {
        let n = g.len();
        let mut m = vec![vec![false; n]; n];
        for (u, vs) in g.succ.iter().enumerate() {
            for &v in vs {
                m[u][v] = true;
            }
        }
        for k in 0..n {
            for i in 0..n {
                if m[i][k] {
                    let row = m[k].clone();
                    for (cell, reach) in m[i].iter_mut().zip(row) {
                        *cell |= reach;
                    }
                }
            }
        }
        m
    }

    proptest! {
        #[test]
        fn validity_matches_brute_force(chains in chain_system()) {
            let g = build_graph(&chains).unwrap();
            let valid = check_valid(&g).is_ok();
            prop_assert_eq!(valid, brute_force_order_exists(&chains));
            prop_assert_eq!(valid, serialize(&g).is_ok());
            prop_assert_eq!(valid, check_shard_coherence(&g).is_ok());
            if let Ok(order) = serialize(&g) {
                prop_assert!(respects(&g, &order));
            }
        }

        #[test]
        fn closure_matches_matrix(chains in chain_system()) {
            let g = build_graph(&chains).unwrap();
            prop_assume!(g.len() <= 10);
            let m = matrix_closure(&g);
            for (a, row) in m.iter().enumerate() {
                for (b, &reach) in row.iter().enumerate() {
                    prop_assert_eq!(g.causes(a, b), reach, "{} -> {}", a, b);
                }
            }
        }
    }
}
