use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lockless_bench::*;
use lockless_shard::bench::{emit_plotdata, plan_constraints, plan_shards, Table, FIG1_FILE, FIG2_FILE};
use lockless_shard::verifier::verify_run;
use lockless_shard::workload::generate;
use lockless_shard::{GenParams, Protocol, RunConfig, Workload};
use log::{error, info, warn};
use serde::Serialize;

/// Simulated cross-shard commit benchmarks.
#[derive(Parser)]
#[command(version, about, after_help = "Log verbosity: LOCKLESS_LOG=debug|info|warn")]
struct Cli {
    /// Directory receiving all outputs; defaults to runs/<command>-seed<seed>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One protocol run, verified.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's protocol.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// JSONL workload; generated from the workload flags when absent.
        #[arg(long)]
        workload: Option<PathBuf>,
        #[command(flatten)]
        gen: GenArgs,
        /// Also write the message trace.
        #[arg(long)]
        trace: bool,
    },
    /// Throughput against shard count.
    SweepShards {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long, default_value = "2,4,8,16")]
        shards: String,
        #[arg(long, default_value = "lockless,locked,nolock")]
        protocols: String,
        #[command(flatten)]
        gen: GenArgs,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Execution time against constraints per transaction.
    SweepConstraints {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "1,2,4,6,8")]
        k: String,
        #[arg(long, default_value = "lockless,locked,nolock")]
        protocols: String,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Checks chain dumps against a workload.
    Verify {
        #[arg(long)]
        chains: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    accounts: usize,
    #[arg(long, default_value_t = 3000)]
    balance: i64,
    #[arg(long, default_value_t = 1500)]
    txs: usize,
    #[arg(long, default_value_t = 4)]
    constraints: usize,
    /// Workload seed; defaults to the run seed.
    #[arg(long)]
    wl_seed: Option<u64>,
}

impl GenArgs {
    fn params(&self, cfg: &RunConfig) -> GenParams {
        GenParams {
            accounts: self.accounts,
            balance: self.balance,
            txs: self.txs,
            constraints: self.constraints,
            seed: self.wl_seed.unwrap_or(cfg.seed),
            shards: cfg.shards,
            ..GenParams::default()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg = RunConfig::from_json(&text)?;
            Ok(cfg)
        }
        None => Ok(RunConfig::default()),
    }
}

fn fit_leaders(wl: Workload, shards: u32) -> Workload {
    if wl.transactions.iter().any(|t| t.leader_shard.0 >= shards) {
        warn!("workload leaders exceed {shards} shards; reassigning round-robin");
        wl.with_leaders(shards)
    } else {
        wl
    }
}

fn run_dir(cli: &Option<PathBuf>, name: &str, seed: u64) -> PathBuf {
    cli.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{name}-seed{seed}")))
}

#[derive(Serialize)]
struct SweepConfig<'a> {
    base: &'a RunConfig,
    workload: Option<&'a Path>,
    generator: &'a GenArgs,
    axis: Vec<u64>,
    protocols: &'a [Protocol],
}

fn finish_sweep(dir: &Path, table: &Table) -> Result<ExitCode> {
    emit_plotdata(table, dir)?;
    write_json(&dir.join("sweep.json"), &summarize(table))?;
    for r in &table.rows {
        println!(
            "{:>3} {:<8} {:>9.2} tx/s {:>9.1} ms  restarts {:>6} rollbacks {:>5}  {}",
            r.x,
            r.protocol,
            r.report.throughput,
            r.report.avg_exec_time_ms,
            r.report.restarts_total,
            r.report.rollbacks_total,
            r.status.as_str()
        );
    }
    let failed = table.failures().count();
    if failed > 0 {
        error!("{failed} sweep rows failed verification; see sweep.json");
        return Ok(ExitCode::FAILURE);
    }
    info!("wrote {} and {} in {}", FIG1_FILE, FIG2_FILE, dir.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    init_logging();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Run {
            config,
            protocol,
            workload,
            gen,
            trace,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = protocol {
                cfg.protocol = *p;
            }
            cfg.trace |= *trace;
            let wl = match workload {
                Some(p) => fit_leaders(load_workload(p)?, cfg.shards),
                None => generate(&gen.params(&cfg))?.with_leaders(cfg.shards),
            };
            let dir = run_dir(&cli.run_dir, &format!("run-{}", cfg.protocol), cfg.seed);
            prepare_run_dir(&dir, &cfg)?;
            std::fs::write(dir.join("workload.jsonl"), wl.to_jsonl_string())?;
            let out = lockless_shard::run(&cfg, &wl)?;
            write_json(&dir.join("report.json"), &out.report)?;
            write_chains(&dir.join("chains"), &out)?;
            if cfg.trace {
                std::fs::write(dir.join("trace.jsonl"), out.trace_jsonl())?;
            }
            let r = &out.report;
            println!(
                "{} shards={} committed={} discarded={} throughput={:.2} tx/s avg_exec={:.1} ms restarts={} rollbacks={}",
                r.protocol, r.shard_count, r.committed, r.discarded, r.throughput, r.avg_exec_time_ms, r.restarts_total, r.rollbacks_total
            );
            if !out.diagnostics.is_empty() {
                std::fs::write(dir.join("diagnostics.txt"), out.diagnostics.join("\n"))?;
            }
            if let Err(e) = out.require_quiescent() {
                error!("{e}; diagnostics in {}", dir.display());
                return Ok(ExitCode::FAILURE);
            }
            let v = verify_run(&out, &wl);
            write_json(&dir.join("verification.json"), &v)?;
            if cfg.protocol != Protocol::Nolock && !v.passed() {
                for msg in &v.violations {
                    error!("{msg}");
                }
                return Ok(ExitCode::FAILURE);
            }
            info!("outputs in {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::SweepShards {
            config,
            workload,
            shards,
            protocols,
            gen,
            jobs,
        } => {
            let base = load_config(config.as_deref())?;
            let counts: Vec<u32> = parse_list(shards)?;
            let protocols: Vec<Protocol> = parse_list(protocols)?;
            anyhow::ensure!(!counts.is_empty(), "no shard counts given");
            let wl = match workload {
                Some(p) => load_workload(p)?,
                None => generate(&gen.params(&base))?,
            };
            let dir = run_dir(&cli.run_dir, "sweep-shards", base.seed);
            prepare_run_dir(
                &dir,
                &SweepConfig {
                    base: &base,
                    workload: workload.as_deref(),
                    generator: gen,
                    axis: counts.iter().map(|&c| c as u64).collect(),
                    protocols: &protocols,
                },
            )?;
            let table = run_parallel(&plan_shards(&base, &wl, &counts, &protocols), *jobs)?;
            finish_sweep(&dir, &table)
        }
        Cmd::SweepConstraints {
            config,
            k,
            protocols,
            gen,
            jobs,
        } => {
            let base = load_config(config.as_deref())?;
            let ks: Vec<usize> = parse_list(k)?;
            let protocols: Vec<Protocol> = parse_list(protocols)?;
            anyhow::ensure!(!ks.is_empty(), "no constraint counts given");
            let dir = run_dir(&cli.run_dir, "sweep-constraints", base.seed);
            prepare_run_dir(
                &dir,
                &SweepConfig {
                    base: &base,
                    workload: None,
                    generator: gen,
                    axis: ks.iter().map(|&k| k as u64).collect(),
                    protocols: &protocols,
                },
            )?;
            let cells = plan_constraints(&base, &gen.params(&base), &ks, &protocols)?;
            let table = run_parallel(&cells, *jobs)?;
            finish_sweep(&dir, &table)
        }
        Cmd::Verify { chains, workload, report } => {
            let wl = load_workload(workload)?;
            let v = verify_dir(chains, &wl)?;
            if let Some(path) = report {
                write_json(path, &v)?;
            }
            println!(
                "valid={} shard_coherent={} replay_match={} serialized={}",
                v.valid,
                v.shard_coherent,
                v.replay_match,
                v.serialization.len()
            );
            for msg in &v.violations {
                error!("{msg}");
            }
            Ok(if v.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
