//! Deterministic discrete-event network of shards.
//!
//! Every shard hosts a leader and a destination. Messages arrive after a
//! seeded random delay in `[delta_min, delta1]`; each protocol decision takes
//! effect `delta3` after the message that triggered it was delivered, and
//! every leader announces its lowest pending id every `delta2`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{LockTimer, LockedDest, NoLockDest};
use crate::dest::{ChainDumpLine, ChainEntry, DestState, DestStats, RollbackScope};
use crate::error::{Error, Result};
use crate::leader::{CommitAck, FinalAck, LeaderMode, LeaderState, LifecycleRecord, Outcome, Outgoing, Vote};
use crate::messages::{Attempt, Endpoint, Envelope, MessageKind, ProtocolMessage, Role, TraceRecord};
use crate::model::{AccountId, ShardConfig, ShardId, SimTime, SubtxKey, VersionedObject};
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Lockless,
    Locked,
    Nolock,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Lockless, Protocol::Locked, Protocol::Nolock];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Lockless => "lockless",
            Protocol::Locked => "locked",
            Protocol::Nolock => "nolock",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lockless" => Ok(Protocol::Lockless),
            "locked" | "lock" => Ok(Protocol::Locked),
            "nolock" | "no-lock" => Ok(Protocol::Nolock),
            other => Err(Error::InvalidConfig(format!("unknown protocol {other:?}"))),
        }
    }
}

fn default_depth() -> usize {
    8
}
fn default_horizon() -> SimTime {
    3_600_000
}
fn default_nodes() -> u32 {
    4
}
fn default_f() -> u32 {
    1
}
fn one() -> u64 {
    1
}

/// Run configuration, read from and written to JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub shards: u32,
    pub delta1: SimTime,
    pub delta2: SimTime,
    pub delta3: SimTime,
    /// Transactions a leader keeps in flight at once.
    #[serde(default = "default_depth")]
    pub pipeline_depth: usize,
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon_ms: SimTime,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default = "default_nodes")]
    pub nodes_per_shard: u32,
    #[serde(default = "default_f")]
    pub byzantine_per_shard: u32,
    /// Clock-skew factor. All shards share one simulated clock, so it only
    /// enters the liveness bound.
    #[serde(default = "one")]
    pub c: u64,
    #[serde(default = "one")]
    pub delta_min: SimTime,
    /// Wait timeout of the lock baseline; ten decision delays when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lock_timeout: Option<SimTime>,
    #[serde(default)]
    pub rollback_scope: RollbackScope,
    /// Keep a full message trace in the output.
    #[serde(default)]
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sc = ShardConfig::default();
        Self {
            shards: sc.shard_count,
            delta1: sc.delta1,
            delta2: sc.delta2,
            delta3: sc.delta3,
            pipeline_depth: default_depth(),
            seed: 1,
            horizon_ms: default_horizon(),
            protocol: Protocol::Lockless,
            nodes_per_shard: sc.nodes_per_shard,
            byzantine_per_shard: sc.byzantine_per_shard,
            c: sc.c,
            delta_min: sc.delta_min,
            lock_timeout: None,
            rollback_scope: RollbackScope::default(),
            trace: false,
        }
    }
}

impl RunConfig {
    pub fn shard_config(&self) -> ShardConfig {
        ShardConfig {
            shard_count: self.shards,
            nodes_per_shard: self.nodes_per_shard,
            byzantine_per_shard: self.byzantine_per_shard,
            delta1: self.delta1,
            delta2: self.delta2,
            delta3: self.delta3,
            delta_min: self.delta_min,
            c: self.c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shard_config().validate()?;
        if self.pipeline_depth == 0 {
            return Err(Error::InvalidConfig("pipeline_depth must be at least 1".into()));
        }
        if self.lock_timeout == Some(0) {
            return Err(Error::InvalidConfig("lock_timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn lock_timeout(&self) -> SimTime {
        self.lock_timeout.unwrap_or(10 * self.delta3.max(1))
    }

    /// Per-transaction latency bound of an uncontended commit.
    pub fn phase_bound(&self) -> SimTime {
        7 * (self.delta1 + self.delta3)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Metrics and end state of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: Protocol,
    pub shard_count: u32,
    pub tx_total: usize,
    pub committed: usize,
    pub discarded: usize,
    pub restarts_total: u64,
    pub rollbacks_total: u64,
    pub sim_duration_ms: SimTime,
    /// Committed transactions per simulated second.
    pub throughput: f64,
    pub avg_exec_time_ms: f64,
    pub quiesced: bool,
    pub messages_total: u64,
    pub message_counts: BTreeMap<MessageKind, u64>,
    pub per_tx: Vec<LifecycleRecord>,
    pub final_balances: BTreeMap<AccountId, i64>,
}

impl RunReport {
    pub fn total_balance(&self) -> i64 {
        self.final_balances.values().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub report: RunReport,
    /// Released chain of every shard, indexed by shard number.
    pub chains: Vec<Vec<ChainEntry>>,
    pub trace: Vec<TraceRecord>,
    pub dest_stats: DestStats,
    pub deadlock_restarts: u64,
    /// Pending work when the horizon was hit.
    pub diagnostics: Vec<String>,
}

impl RunOutput {
    pub fn chain_dumps(&self) -> Vec<Vec<ChainDumpLine>> {
        self.chains.iter().map(ChainDumpLine::from_entries).collect()
    }

    /// One JSON line per chain entry.
    pub fn chain_jsonl(&self, shard: usize) -> String {
        let mut s = String::new();
        for line in ChainDumpLine::from_entries(&self.chains[shard]) {
            s.push_str(&serde_json::to_string(&line).expect("chain line serializes"));
            s.push('\n');
        }
        s
    }

    pub fn trace_jsonl(&self) -> String {
        let mut s = String::new();
        for rec in &self.trace {
            s.push_str(&serde_json::to_string(rec).expect("trace serializes"));
            s.push('\n');
        }
        s
    }

    pub fn require_quiescent(&self) -> Result<()> {
        if self.report.quiesced {
            Ok(())
        } else {
            Err(Error::NonQuiescent {
                horizon_ms: self.config.horizon_ms,
                pending: self.report.tx_total - self.report.committed - self.report.discarded,
            })
        }
    }
}

#[derive(Debug, Clone)]
enum DestNode {
    Lockless(DestState),
    Locked(LockedDest),
    Nolock(NoLockDest),
}

impl DestNode {
    fn chain(&self) -> &[ChainEntry] {
        match self {
            DestNode::Lockless(d) => d.chain(),
            DestNode::Locked(d) => d.chain(),
            DestNode::Nolock(d) => d.chain(),
        }
    }

    fn snapshot(&self) -> Vec<VersionedObject> {
        match self {
            DestNode::Lockless(d) => d.snapshot(),
            DestNode::Locked(d) => d.snapshot(),
            DestNode::Nolock(d) => d.snapshot(),
        }
    }

    fn is_quiescent(&self) -> bool {
        match self {
            DestNode::Lockless(d) => d.is_quiescent(),
            DestNode::Locked(d) => d.is_quiescent(),
            DestNode::Nolock(d) => d.is_quiescent(),
        }
    }
}

#[derive(Debug, Clone)]
enum Action {
    Deliver(Envelope),
    /// A decision triggered by a delivered message.
    Process {
        shard: ShardId,
        from: ShardId,
        role: Role,
        msg: ProtocolMessage,
    },
    Dispatch(ShardId),
    GossipTimer(ShardId),
    LockTimeout {
        shard: ShardId,
        key: SubtxKey,
        attempt: Attempt,
    },
    Arrival(usize),
}

impl Action {
    /// Background activity that never keeps a run alive on its own.
    fn is_background(&self) -> bool {
        match self {
            Action::GossipTimer(_) | Action::LockTimeout { .. } => true,
            Action::Deliver(env) => env.msg.kind() == MessageKind::LowestIdGossip,
            _ => false,
        }
    }
}

/// The simulator itself. Most callers only need [`run`].
pub struct Simulator<'w> {
    cfg: RunConfig,
    workload: &'w Workload,
    now: SimTime,
    seq: u64,
    queue: BTreeMap<(SimTime, u64), Action>,
    live_events: usize,
    rng: ChaCha8Rng,
    leaders: Vec<LeaderState>,
    dests: Vec<DestNode>,
    trace: Vec<TraceRecord>,
    message_counts: BTreeMap<MessageKind, u64>,
    last_gossip: Vec<Option<SimTime>>,
    last_live: SimTime,
    delay_policy: Option<DelayPolicy<'w>>,
}

/// Chooses the delay of a message instead of the random draw; `None`
/// falls back to the draw.
pub type DelayPolicy<'w> = Box<dyn FnMut(&Envelope) -> Option<SimTime> + 'w>;

impl<'w> Simulator<'w> {
    pub fn new(cfg: RunConfig, workload: &'w Workload) -> Result<Self> {
        cfg.validate()?;
        workload.validate(cfg.shards)?;
        let partition = workload.partition(cfg.shards);
        let mode = match cfg.protocol {
            Protocol::Lockless => LeaderMode::Lockless,
            Protocol::Locked | Protocol::Nolock => LeaderMode::TwoRound,
        };
        let mut per_shard: Vec<Vec<(AccountId, i64)>> = vec![Vec::new(); cfg.shards as usize];
        for a in &workload.accounts {
            per_shard[partition.shard_of(&a.id).0 as usize].push((a.id.clone(), a.balance));
        }
        let dests = per_shard
            .into_iter()
            .enumerate()
            .map(|(i, accts)| {
                let id = ShardId(i as u32);
                match cfg.protocol {
                    Protocol::Lockless => DestNode::Lockless(DestState::new(id, accts, cfg.rollback_scope)),
                    Protocol::Locked => DestNode::Locked(LockedDest::new(id, accts)),
                    Protocol::Nolock => DestNode::Nolock(NoLockDest::new(id, accts)),
                }
            })
            .collect();
        let leaders = (0..cfg.shards)
            .map(|i| LeaderState::new(ShardId(i), mode, cfg.pipeline_depth, partition.clone()))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shards = cfg.shards as usize;
        Ok(Self {
            cfg,
            workload,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            live_events: 0,
            rng,
            leaders,
            dests,
            trace: Vec::new(),
            message_counts: BTreeMap::new(),
            last_gossip: vec![None; shards],
            last_live: 0,
            delay_policy: None,
        })
    }

    fn schedule(&mut self, at: SimTime, action: Action) {
        assert!(at >= self.now, "event scheduled in the past");
        if !action.is_background() {
            self.live_events += 1;
        }
        self.queue.insert((at, self.seq), action);
        self.seq += 1;
    }

    /// Delay of one message, uniform over `[delta_min, delta1]`.
    pub fn draw_delay(&mut self) -> SimTime {
        self.rng.gen_range(self.cfg.delta_min..=self.cfg.delta1)
    }

    /// Scripts message delays, for adversarial schedules. Every chosen
    /// delay must stay within `[delta_min, delta1]`.
    pub fn with_delay_policy(mut self, policy: impl FnMut(&Envelope) -> Option<SimTime> + 'w) -> Self {
        self.delay_policy = Some(Box::new(policy));
        self
    }

    fn send(&mut self, from: ShardId, role: Role, out: Outgoing) {
        for (to, msg) in out {
            let drawn = self.draw_delay();
            let mut env = Envelope {
                from: Endpoint::Shard(from),
                to,
                role,
                send_time: self.now,
                deliver_time: self.now + drawn,
                msg,
            };
            if let Some(chosen) = self.delay_policy.as_mut().and_then(|p| p(&env)) {
                assert!(
                    (self.cfg.delta_min..=self.cfg.delta1).contains(&chosen),
                    "scripted delay {chosen} outside [{}, {}]",
                    self.cfg.delta_min,
                    self.cfg.delta1
                );
                env.deliver_time = self.now + chosen;
            }
            self.schedule(env.deliver_time, Action::Deliver(env));
        }
    }

    fn record(&mut self, env: &Envelope) {
        *self.message_counts.entry(env.msg.kind()).or_insert(0) += 1;
        if self.cfg.trace {
            self.trace.push(TraceRecord::from(env));
        }
    }

    fn plan_dispatches(&mut self, shard: ShardId) {
        let n = self.leaders[shard.0 as usize].reserve_dispatches();
        for _ in 0..n {
            self.schedule(self.now + self.cfg.delta3, Action::Dispatch(shard));
        }
    }

    fn quiescent(&self) -> bool {
        self.live_events == 0
            && self.leaders.iter().all(LeaderState::is_idle)
            && self.dests.iter().all(DestNode::is_quiescent)
    }

    /// Runs to quiescence or until the horizon passes.
    pub fn run(mut self) -> RunOutput {
        for (i, tx) in self.workload.transactions.iter().enumerate() {
            self.schedule(tx.id.timestamp, Action::Arrival(i));
        }
        for s in 0..self.cfg.shards {
            self.schedule(0, Action::GossipTimer(ShardId(s)));
        }
        let mut quiesced = self.quiescent();
        while !quiesced {
            let Some(((at, _), action)) = self.queue.pop_first() else {
                break;
            };
            if at > self.cfg.horizon_ms {
                break;
            }
            debug_assert!(at >= self.now);
            self.now = at;
            if !action.is_background() {
                self.live_events -= 1;
                self.last_live = at;
            }
            self.step(action);
            quiesced = self.quiescent();
        }
        if !quiesced {
            warn!("run stopped at {} ms without quiescing", self.now);
        }
        self.finish(quiesced)
    }

    fn step(&mut self, action: Action) {
        match action {
            Action::Arrival(i) => {
                let tx = self.workload.transactions[i].clone();
                let leader = tx.leader_shard;
                let env = Envelope {
                    from: Endpoint::Client,
                    to: leader,
                    role: Role::Leader,
                    send_time: self.now,
                    deliver_time: self.now,
                    msg: ProtocolMessage::ClientSubmit { tx: tx.clone() },
                };
                self.record(&env);
                self.leaders[leader.0 as usize].submit(tx, self.now);
                self.plan_dispatches(leader);
            }
            Action::Deliver(env) => {
                let delay = env.deliver_time - env.send_time;
                assert!(
                    delay <= self.cfg.delta1,
                    "message delayed {delay} ms, bound is {}",
                    self.cfg.delta1
                );
                self.record(&env);
                let Endpoint::Shard(from) = env.from else {
                    unreachable!("clients submit directly");
                };
                if let ProtocolMessage::LowestIdGossip { lowest } = env.msg {
                    let to = env.to.0 as usize;
                    self.leaders[to].known_lowest.insert(from, lowest);
                    if let DestNode::Lockless(d) = &mut self.dests[to] {
                        d.update_lowest(from, lowest);
                    }
                    return;
                }
                self.schedule(
                    self.now + self.cfg.delta3,
                    Action::Process {
                        shard: env.to,
                        from,
                        role: env.role,
                        msg: env.msg,
                    },
                );
            }
            Action::Process { shard, from, role, msg } => match role {
                Role::Leader => {
                    let out = self.leader_handle(shard, msg);
                    self.send(shard, Role::Destination, out);
                    self.plan_dispatches(shard);
                }
                Role::Destination => {
                    let (out, timers) = match &mut self.dests[shard.0 as usize] {
                        DestNode::Lockless(d) => (d.handle(from, msg), Vec::new()),
                        DestNode::Nolock(d) => (d.handle(from, msg), Vec::new()),
                        DestNode::Locked(d) => d.handle(from, msg),
                    };
                    self.send(shard, Role::Leader, out);
                    self.arm(shard, timers);
                }
                Role::Both => unreachable!("only gossip goes to both halves"),
            },
            Action::Dispatch(shard) => {
                let out = self.leaders[shard.0 as usize].phase1_dispatch(self.now);
                self.send(shard, Role::Destination, out);
            }
            Action::GossipTimer(shard) => {
                let i = shard.0 as usize;
                if let Some(prev) = self.last_gossip[i] {
                    debug_assert_eq!(self.now - prev, self.cfg.delta2);
                }
                self.last_gossip[i] = Some(self.now);
                let out = self.leaders[i].gossip_lowest(self.cfg.shards);
                self.send(shard, Role::Both, out);
                self.schedule(self.now + self.cfg.delta2, Action::GossipTimer(shard));
            }
            Action::LockTimeout { shard, key, attempt } => {
                if let DestNode::Locked(d) = &mut self.dests[shard.0 as usize] {
                    let (out, timers) = d.on_timeout(&key, attempt);
                    self.send(shard, Role::Leader, out);
                    self.arm(shard, timers);
                }
            }
        }
    }

    fn arm(&mut self, shard: ShardId, timers: Vec<LockTimer>) {
        let at = self.now + self.cfg.lock_timeout();
        for t in timers {
            self.schedule(
                at,
                Action::LockTimeout {
                    shard,
                    key: t.key,
                    attempt: t.attempt,
                },
            );
        }
    }

    fn leader_handle(&mut self, shard: ShardId, msg: ProtocolMessage) -> Outgoing {
        use ProtocolMessage as M;
        let now = self.now;
        let l = &mut self.leaders[shard.0 as usize];
        match msg {
            M::CommitVote { key, attempt } => l.phase3_collect(&key, attempt, Vote::Commit),
            M::AbortVote { key, attempt } => l.phase3_collect(&key, attempt, Vote::Abort),
            M::Committed { key, attempt } => l.phase5_collect(&key, attempt, CommitAck::Committed, now),
            M::RestartVote { key, attempt } => l.phase5_collect(&key, attempt, CommitAck::RestartVote, now),
            M::Aborted { key, attempt } => l.phase5_collect(&key, attempt, CommitAck::Aborted, now),
            M::Released { key, attempt } => l.phase7_collect(&key, attempt, FinalAck::Released, now),
            M::Restarted { key, attempt } => l.phase7_collect(&key, attempt, FinalAck::Restarted, now),
            M::ForceRollback { key, attempt } => l.handle_force_rollback(&key, attempt),
            M::Rollbacked { key, attempt } => l.handle_rollbacked(&key, attempt),
            other => panic!("{shard}: leader cannot handle {:?}", other.kind()),
        }
    }

    fn finish(self, quiesced: bool) -> RunOutput {
        let mut per_tx: Vec<LifecycleRecord> = self
            .leaders
            .iter()
            .flat_map(|l| l.records.values().cloned())
            .collect();
        per_tx.sort_by_key(|r| r.tx);
        let committed: Vec<&LifecycleRecord> = per_tx
            .iter()
            .filter(|r| r.outcome == Some(Outcome::Committed))
            .collect();
        let discarded = per_tx.iter().filter(|r| r.outcome == Some(Outcome::Discarded)).count();
        let exec_sum: u64 = committed
            .iter()
            .map(|r| r.commit_time.expect("committed has a time") - r.submitted_at)
            .sum();
        let avg_exec_time_ms = if committed.is_empty() {
            0.0
        } else {
            exec_sum as f64 / committed.len() as f64
        };
        let sim_duration_ms = self.last_live;
        let throughput = if sim_duration_ms == 0 {
            0.0
        } else {
            committed.len() as f64 * 1000.0 / sim_duration_ms as f64
        };
        let final_balances: BTreeMap<AccountId, i64> = self
            .dests
            .iter()
            .flat_map(|d| d.snapshot())
            .map(|o| (o.id, o.balance))
            .collect();
        let mut diagnostics = Vec::new();
        if !quiesced {
            for l in &self.leaders {
                if !l.is_idle() {
                    diagnostics.push(format!(
                        "{}: {} pooled, {} in flight {:?}",
                        l.shard_id,
                        l.pool.len(),
                        l.in_flight.len(),
                        l.in_flight.values().map(|p| (p.tx.id, p.stage)).collect::<Vec<_>>()
                    ));
                }
            }
        }
        let mut dest_stats = DestStats::default();
        let mut deadlock_restarts = 0;
        for d in &self.dests {
            match d {
                DestNode::Lockless(d) => {
                    let s = &d.stats;
                    dest_stats.commit_votes += s.commit_votes;
                    dest_stats.abort_votes += s.abort_votes;
                    dest_stats.restart_votes += s.restart_votes;
                    dest_stats.override_commits += s.override_commits;
                    dest_stats.rollback_requests_sent += s.rollback_requests_sent;
                    dest_stats.entries_undone += s.entries_undone;
                    dest_stats.stale_dropped += s.stale_dropped;
                }
                DestNode::Locked(d) => deadlock_restarts += d.deadlock_restarts,
                DestNode::Nolock(_) => {}
            }
        }
        let report = RunReport {
            protocol: self.cfg.protocol,
            shard_count: self.cfg.shards,
            tx_total: self.workload.transactions.len(),
            committed: committed.len(),
            discarded,
            restarts_total: per_tx.iter().map(|r| r.restarts as u64).sum(),
            rollbacks_total: per_tx.iter().map(|r| r.rollbacks as u64).sum(),
            sim_duration_ms,
            throughput,
            avg_exec_time_ms,
            quiesced,
            messages_total: self.message_counts.values().sum(),
            message_counts: self.message_counts,
            per_tx,
            final_balances,
        };
        info!(
            "{} on {} shards: {}/{} committed, {} discarded in {} ms",
            report.protocol, report.shard_count, report.committed, report.tx_total, report.discarded, sim_duration_ms
        );
        let chains = self.dests.iter().map(|d| d.chain().to_vec()).collect();
        RunOutput {
            config: self.cfg,
            report,
            chains,
            trace: self.trace,
            dest_stats,
            deadlock_restarts,
            diagnostics,
        }
    }
}

/// Runs `workload` under `cfg`.
pub fn run(cfg: &RunConfig, workload: &Workload) -> Result<RunOutput> {
    debug!("starting {} run, seed {}", cfg.protocol, cfg.seed);
    Ok(Simulator::new(cfg.clone(), workload)?.run())
}

/// Ids of transactions in flight or pooled that are smaller than `id`, for
/// each transaction, at the given instants.
pub fn smaller_pending(per_tx: &[LifecycleRecord], at: &BTreeMap<crate::model::TxId, SimTime>) -> BTreeMap<crate::model::TxId, usize> {
    let resolved: BTreeMap<_, _> = per_tx.iter().map(|r| (r.tx, r.commit_time)).collect();
    let submitted: BTreeMap<_, _> = per_tx.iter().map(|r| (r.tx, r.submitted_at)).collect();
    let mut out = BTreeMap::new();
    let ids: BTreeSet<_> = per_tx.iter().map(|r| r.tx).collect();
    for (&id, &t) in at {
        let q = ids
            .range(..id)
            .filter(|other| submitted[*other] <= t && resolved[*other].is_none_or(|c| c > t))
            .count();
        out.insert(id, q);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ShardId, TxId};
    use crate::workload::{fixtures, generate, GenParams};

    fn cfg(shards: u32) -> RunConfig {
        RunConfig {
            shards,
            ..RunConfig::default()
        }
    }

    #[test]
    fn delay_within_bounds_over_many_draws() {
        let wl = Workload::default();
        let c = RunConfig {
            delta1: 10,
            ..cfg(1)
        };
        let mut sim = Simulator::new(c, &wl).unwrap();
        let mut seen = BTreeSet::new();
        for _ in 0..10_000 {
            let d = sim.draw_delay();
            assert!((1..=10).contains(&d), "delay {d}");
            seen.insert(d);
        }
        assert_eq!(seen.len(), 10, "every delay in the interval occurs");
    }

    #[test]
    fn degenerate_delay_interval() {
        let wl = Workload::default();
        let c = RunConfig {
            delta1: 1,
            delta_min: 1,
            ..cfg(1)
        };
        let mut sim = Simulator::new(c, &wl).unwrap();
        assert!((0..100).all(|_| sim.draw_delay() == 1));
    }

    #[test]
    fn scripted_delays_apply() {
        let wl = fixtures::example_one();
        let c = RunConfig {
            trace: true,
            ..cfg(3)
        };
        let out = Simulator::new(c, &wl)
            .unwrap()
            .with_delay_policy(|env| (env.msg.kind() == MessageKind::CommitVote).then_some(5))
            .run();
        let votes: Vec<_> = out.trace.iter().filter(|t| t.kind == MessageKind::CommitVote).collect();
        assert_eq!(votes.len(), 3);
        assert!(votes.iter().all(|t| t.t_deliver - t.t_send == 5));
        assert_eq!(out.report.committed, 1);
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn scripted_delay_out_of_bounds() {
        let wl = fixtures::example_one();
        let _ = Simulator::new(cfg(3), &wl).unwrap().with_delay_policy(|_| Some(0)).run();
    }

    #[test]
    fn empty_workload_quiesces_immediately() {
        let out = run(&cfg(4), &Workload::default()).unwrap();
        assert!(out.report.quiesced);
        assert_eq!(out.report.tx_total, 0);
        assert_eq!(out.report.sim_duration_ms, 0);
    }

    #[test]
    fn example_one_end_to_end() {
        let wl = fixtures::example_one();
        for protocol in Protocol::ALL {
            let c = RunConfig {
                protocol,
                trace: true,
                ..cfg(3)
            };
            let out = run(&c, &wl).unwrap();
            let r = &out.report;
            assert!(r.quiesced, "{protocol}");
            assert_eq!(r.committed, 1, "{protocol}");
            assert_eq!(r.final_balances[&"Rock".into()], 1000);
            assert_eq!(r.final_balances[&"Asma".into()], 2500);
            assert_eq!(r.final_balances[&"Mark".into()], 200);
            assert!(out.trace.iter().all(|t| t.t_deliver - t.t_send <= c.delta1));
        }
    }

    #[test]
    fn happy_path_latency_bound() {
        let wl = fixtures::example_one();
        for seed in 0..50 {
            let c = RunConfig {
                delta1: 10,
                delta3: 30,
                seed,
                ..cfg(3)
            };
            let out = run(&c, &wl).unwrap();
            let rec = &out.report.per_tx[0];
            let latency = rec.commit_time.unwrap() - rec.submitted_at;
            // Seven decisions and six network hops.
            assert!(latency >= 7 * 30 + 6, "{latency}");
            assert!(latency <= c.phase_bound(), "{latency} > {}", c.phase_bound());
        }
    }

    #[test]
    fn vote_follows_dispatch_by_one_decision() {
        let wl = fixtures::example_one();
        let c = RunConfig {
            trace: true,
            delta1: 4,
            delta_min: 4,
            ..cfg(3)
        };
        let out = run(&c, &wl).unwrap();
        let dispatch = out.trace.iter().find(|t| t.kind == MessageKind::SubtxDispatch).unwrap();
        let vote = out
            .trace
            .iter()
            .find(|t| t.kind == MessageKind::CommitVote && t.object == dispatch.object)
            .unwrap();
        assert_eq!(vote.t_send, dispatch.t_deliver + c.delta3);
    }

    #[test]
    fn zero_decision_delay() {
        let wl = fixtures::example_one();
        let c = RunConfig { delta3: 0, ..cfg(3) };
        let out = run(&c, &wl).unwrap();
        let rec = &out.report.per_tx[0];
        assert!(rec.commit_time.unwrap() - rec.submitted_at <= 7 * c.delta1);
    }

    #[test]
    fn gossip_period_exact() {
        let wl = fixtures::example_two(5000, 40);
        let c = RunConfig {
            trace: true,
            ..cfg(4)
        };
        let out = run(&c, &wl).unwrap();
        let sends: Vec<SimTime> = out
            .trace
            .iter()
            .filter(|t| t.kind == MessageKind::LowestIdGossip && t.from == Endpoint::Shard(ShardId(1)) && t.to == ShardId(0))
            .map(|t| t.t_send)
            .collect();
        assert!(sends.len() >= 3);
        for w in sends.windows(2) {
            assert_eq!(w[1] - w[0], c.delta2);
        }
    }

    #[test]
    fn deterministic_reports() {
        let wl = generate(&GenParams {
            txs: 200,
            accounts: 100,
            ..GenParams::default()
        })
        .unwrap();
        for protocol in Protocol::ALL {
            let c = RunConfig { protocol, ..cfg(4) };
            let a = run(&c, &wl).unwrap();
            let b = run(&c, &wl).unwrap();
            assert_eq!(a.report.to_json(), b.report.to_json());
            assert_eq!(a.chain_dumps(), b.chain_dumps());
        }
    }

    #[test]
    fn horizon_stops_run() {
        let wl = fixtures::example_one();
        let c = RunConfig {
            horizon_ms: 50,
            ..cfg(3)
        };
        let out = run(&c, &wl).unwrap();
        assert!(!out.report.quiesced);
        assert!(!out.diagnostics.is_empty());
        assert!(matches!(out.require_quiescent(), Err(Error::NonQuiescent { .. })));
    }

    #[test]
    fn config_json_shape() {
        let c = RunConfig::from_json(
            r#"{"shards":8,"delta1":5,"delta2":50,"delta3":30,"pipeline_depth":4,"seed":9,"horizon_ms":100000,"protocol":"locked"}"#,
        )
        .unwrap();
        assert_eq!(c.protocol, Protocol::Locked);
        assert_eq!(c.pipeline_depth, 4);
        assert_eq!(c.lock_timeout(), 300);
        assert!(RunConfig::from_json(r#"{"shards":0,"delta1":5,"delta2":50,"delta3":30,"seed":1}"#).is_err());
        assert_eq!("no-lock".parse::<Protocol>().unwrap(), Protocol::Nolock);
    }

    #[test]
    fn smaller_pending_counts() {
        let rec = |ts, sub, commit| LifecycleRecord {
            tx: TxId::new(ts, 0, 0),
            submitted_at: sub,
            attempts: 1,
            restarts: 0,
            rollbacks: 0,
            outcome: Some(Outcome::Committed),
            commit_time: Some(commit),
            last_start: Some(sub),
        };
        let per_tx = vec![rec(0, 0, 100), rec(1, 1, 50), rec(2, 2, 300)];
        let at = BTreeMap::from([(TxId::new(2, 0, 0), 60)]);
        assert_eq!(smaller_pending(&per_tx, &at)[&TxId::new(2, 0, 0)], 1);
    }
}
