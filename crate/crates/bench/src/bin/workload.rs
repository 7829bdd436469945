use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lockless_shard::workload::generate;
use lockless_shard::GenParams;
use log::info;

/// Seeded transfer workloads as JSON lines.
#[derive(Parser)]
#[command(version, about, after_help = "Log verbosity: LOCKLESS_LOG=debug|info|warn")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Gen {
        #[arg(long, default_value_t = 1000)]
        accounts: usize,
        #[arg(long, default_value_t = 3000)]
        balance: i64,
        #[arg(long, default_value_t = 1500)]
        txs: usize,
        /// Extra balance conditions per transaction.
        #[arg(long, default_value_t = 4)]
        constraints: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Leaders are spread round-robin over this many shards.
        #[arg(long, default_value_t = 4)]
        shards: u32,
        /// Simulated milliseconds between arrivals.
        #[arg(long, default_value_t = 1)]
        interval: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    lockless_bench::init_logging();
    let Cmd::Gen {
        accounts,
        balance,
        txs,
        constraints,
        seed,
        shards,
        interval,
        out,
    } = Cli::parse().cmd;
    let wl = generate(&GenParams {
        accounts,
        balance,
        txs,
        constraints,
        seed,
        shards,
        arrival_interval_ms: interval,
        ..GenParams::default()
    })?
    .with_leaders(shards);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    wl.write_jsonl(BufWriter::new(file))?;
    info!(
        "{} accounts, {} transactions, total balance {} -> {}",
        wl.accounts.len(),
        wl.transactions.len(),
        wl.total_balance(),
        out.display()
    );
    Ok(())
}
