//! Run directories, parallel sweeps and chain-dump loading for the `bench`
//! and `workload` binaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lockless_shard::bench::{run_cell, Cell, Row, RowStatus, SweepKind, Table};
use lockless_shard::dest::ChainDumpLine;
use lockless_shard::model::AccountId;
use lockless_shard::verifier::{chains_from_dumps, verify, LocalChain, VerificationReport};
use lockless_shard::{Protocol, RunOutput, Workload};
use rayon::prelude::*;
use serde::Serialize;

pub const FINAL_BALANCES_FILE: &str = "final_balances.json";

pub type Balances = BTreeMap<AccountId, i64>;

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LOCKLESS_LOG", "info")).init();
}

/// Creates `dir` and copies the configuration into it.
pub fn prepare_run_dir(dir: &Path, config: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), config)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn load_workload(path: &Path) -> Result<Workload> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Workload::from_jsonl_str(&text)?)
}

/// Writes `shard_<i>.jsonl` for every shard plus the final balances into
/// `dir`, the layout `load_chains` reads back.
pub fn write_chains(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    for shard in 0..out.chains.len() {
        fs::write(dir.join(format!("shard_{shard}.jsonl")), out.chain_jsonl(shard))?;
    }
    write_json(&dir.join(FINAL_BALANCES_FILE), &out.report.final_balances)
}

/// Reads `shard_<i>.jsonl` files in shard order, and the final balances
/// when present.
pub fn load_chains(dir: &Path) -> Result<(Vec<LocalChain>, Option<Balances>)> {
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(n) = name.strip_prefix("shard_").and_then(|n| n.strip_suffix(".jsonl")) {
            files.push((n.parse().with_context(|| format!("bad chain file name {name}"))?, path));
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no shard_<n>.jsonl files in {}", dir.display());
    }
    if files.iter().enumerate().any(|(i, (n, _))| *n != i) {
        bail!("chain files in {} are not numbered 0..{}", dir.display(), files.len());
    }
    let mut dumps = Vec::with_capacity(files.len());
    for (_, path) in &files {
        let text = fs::read_to_string(path)?;
        let lines: Vec<ChainDumpLine> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
            .collect::<Result<_>>()?;
        dumps.push(lines);
    }
    let balances_path = dir.join(FINAL_BALANCES_FILE);
    let balances = if balances_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&balances_path)?)?)
    } else {
        None
    };
    Ok((chains_from_dumps(&dumps), balances))
}

/// Verifies chain dumps on disk against a workload.
pub fn verify_dir(chains_dir: &Path, workload: &Workload) -> Result<VerificationReport> {
    let (chains, balances) = load_chains(chains_dir)?;
    let partition = workload.partition(chains.len() as u32);
    Ok(verify(
        &chains,
        &workload.transactions,
        &workload.initial_balances(),
        balances.as_ref(),
        Some(&partition),
    ))
}

/// Runs cells on a thread pool of `jobs` threads (0 picks the default);
/// rows come back in cell order.
pub fn run_parallel(cells: &[Cell], jobs: usize) -> Result<Table> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let rows = pool.install(|| cells.par_iter().map(run_cell).collect::<Result<Vec<_>, _>>())?;
    Ok(Table { rows })
}

/// A sweep row without per-transaction records and balances.
#[derive(Debug, Serialize)]
pub struct RowSummary {
    pub kind: SweepKind,
    pub x: u64,
    pub protocol: Protocol,
    pub status: RowStatus,
    pub committed: usize,
    pub discarded: usize,
    pub throughput: f64,
    pub avg_exec_time_ms: f64,
    pub restarts: u64,
    pub rollbacks: u64,
    pub sim_duration_ms: u64,
    pub total_balance: i64,
    pub violations: Vec<String>,
}

impl From<&Row> for RowSummary {
    fn from(r: &Row) -> Self {
        Self {
            kind: r.kind,
            x: r.x,
            protocol: r.protocol,
            status: r.status,
            committed: r.report.committed,
            discarded: r.report.discarded,
            throughput: r.report.throughput,
            avg_exec_time_ms: r.report.avg_exec_time_ms,
            restarts: r.report.restarts_total,
            rollbacks: r.report.rollbacks_total,
            sim_duration_ms: r.report.sim_duration_ms,
            total_balance: r.report.total_balance(),
            violations: r.verification.as_ref().map(|v| v.violations.clone()).unwrap_or_default(),
        }
    }
}

pub fn summarize(table: &Table) -> Vec<RowSummary> {
    table.rows.iter().map(RowSummary::from).collect()
}

/// Comma-separated list parsing for sweep axes.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| anyhow::anyhow!("{p:?}: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lockless_shard::workload::fixtures;
    use lockless_shard::RunConfig;

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list::<u32>("2, 4,8,").unwrap(), vec![2, 4, 8]);
        assert_eq!(
            parse_list::<Protocol>("lockless,nolock").unwrap(),
            vec![Protocol::Lockless, Protocol::Nolock]
        );
        assert!(parse_list::<u32>("2,x").is_err());
    }

    #[test]
    fn chains_round_trip_through_disk() {
        let wl = fixtures::example_one();
        let cfg = RunConfig {
            shards: 3,
            ..RunConfig::default()
        };
        let out = lockless_shard::run(&cfg, &wl).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_chains(dir.path(), &out).unwrap();
        let report = verify_dir(dir.path(), &wl).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        assert_eq!(report.serialization.len(), 1);
    }

    #[test]
    fn missing_chain_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_chains(dir.path()).is_err());
        fs::write(dir.path().join("shard_1.jsonl"), "").unwrap();
        assert!(load_chains(dir.path()).is_err());
    }
}
