//! Sweeps over shard count and constraint count, and their CSV tables.

use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::{run, Protocol, RunConfig, RunReport};
use crate::verifier::{verify_run, VerificationReport};
use crate::workload::{generate, GenParams, Workload};

pub const FIG1_FILE: &str = "fig1_throughput_vs_shards.csv";
pub const FIG2_FILE: &str = "fig2_exectime_vs_constraints.csv";

pub const DEFAULT_SHARD_COUNTS: [u32; 4] = [2, 4, 8, 16];
pub const DEFAULT_CONSTRAINTS: [usize; 5] = [1, 2, 4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Shards,
    Constraints,
}

/// One isolated simulator run inside a sweep.
#[derive(Debug, Clone)]
pub struct Cell {
    pub kind: SweepKind,
    /// Shard count or constraint count, depending on `kind`.
    pub x: u64,
    pub config: RunConfig,
    pub workload: Workload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    NonQuiescent,
    VerifyFailed,
}

impl RowStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::NonQuiescent => "non_quiescent",
            RowStatus::VerifyFailed => "verify_failed",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Row {
    pub kind: SweepKind,
    pub x: u64,
    pub protocol: Protocol,
    pub status: RowStatus,
    pub report: RunReport,
    /// Present for the lockless and locked protocols.
    pub verification: Option<VerificationReport>,
}

impl Row {
    pub fn ok(&self) -> bool {
        self.status == RowStatus::Ok
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<Row>,
}

impl Table {
    pub fn of(&self, kind: SweepKind) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    pub fn get(&self, kind: SweepKind, x: u64, protocol: Protocol) -> Option<&Row> {
        self.of(kind).find(|r| r.x == x && r.protocol == protocol)
    }

    /// Rows whose run failed verification.
    pub fn failures(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.status == RowStatus::VerifyFailed)
    }

    pub fn extend(&mut self, other: Table) {
        self.rows.extend(other.rows);
    }
}

/// Cells for a throughput-versus-shards sweep; the workload's leaders are
/// reassigned for every shard count.
pub fn plan_shards(base: &RunConfig, workload: &Workload, shard_counts: &[u32], protocols: &[Protocol]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &shards in shard_counts {
        let wl = workload.clone().with_leaders(shards);
        for &protocol in protocols {
            cells.push(Cell {
                kind: SweepKind::Shards,
                x: shards as u64,
                config: RunConfig {
                    shards,
                    protocol,
                    ..base.clone()
                },
                workload: wl.clone(),
            });
        }
    }
    cells
}

/// Cells for an execution-time-versus-constraints sweep at `base.shards`.
pub fn plan_constraints(
    base: &RunConfig,
    params: &GenParams,
    k_values: &[usize],
    protocols: &[Protocol],
) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for &k in k_values {
        let wl = generate(&GenParams {
            constraints: k,
            shards: base.shards,
            ..params.clone()
        })?
        .with_leaders(base.shards);
        for &protocol in protocols {
            cells.push(Cell {
                kind: SweepKind::Constraints,
                x: k as u64,
                config: RunConfig {
                    protocol,
                    ..base.clone()
                },
                workload: wl.clone(),
            });
        }
    }
    Ok(cells)
}

/// Runs a cell and checks it; the lockless and locked runs go through the
/// verifier.
pub fn run_cell(cell: &Cell) -> Result<Row> {
    let out = run(&cell.config, &cell.workload)?;
    let protocol = cell.config.protocol;
    let verification = match protocol {
        Protocol::Lockless | Protocol::Locked if out.report.quiesced => Some(verify_run(&out, &cell.workload)),
        _ => None,
    };
    let status = if !out.report.quiesced {
        warn!("{protocol} at {:?}={} did not quiesce", cell.kind, cell.x);
        RowStatus::NonQuiescent
    } else if verification.as_ref().is_some_and(|v| !v.passed()) {
        warn!(
            "{protocol} at {:?}={} failed verification: {:?}",
            cell.kind,
            cell.x,
            verification.as_ref().map(|v| &v.violations)
        );
        RowStatus::VerifyFailed
    } else {
        RowStatus::Ok
    };
    info!(
        "{protocol} {:?}={} throughput {:.1} exec {:.1} ms",
        cell.kind, cell.x, out.report.throughput, out.report.avg_exec_time_ms
    );
    Ok(Row {
        kind: cell.kind,
        x: cell.x,
        protocol,
        status,
        report: out.report,
        verification,
    })
}

pub fn run_cells(cells: &[Cell]) -> Result<Table> {
    Ok(Table {
        rows: cells.iter().map(run_cell).collect::<Result<_>>()?,
    })
}

pub fn sweep_shards(base: &RunConfig, workload: &Workload, shard_counts: &[u32], protocols: &[Protocol]) -> Result<Table> {
    run_cells(&plan_shards(base, workload, shard_counts, protocols))
}

pub fn sweep_constraints(
    base: &RunConfig,
    params: &GenParams,
    k_values: &[usize],
    protocols: &[Protocol],
) -> Result<Table> {
    run_cells(&plan_constraints(base, params, k_values, protocols)?)
}

/// Throughput-versus-shards table. Rows that failed verification are left
/// out; non-quiescent rows stay in, marked by their status.
pub fn write_fig1(table: &Table, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["shard_count", "protocol", "throughput", "avg_exec_time", "restarts", "rollbacks", "status"])
        .map_err(csv_err)?;
    for r in table.of(SweepKind::Shards).filter(|r| r.status != RowStatus::VerifyFailed) {
        out.write_record([
            r.x.to_string(),
            r.protocol.to_string(),
            format!("{:.3}", r.report.throughput),
            format!("{:.3}", r.report.avg_exec_time_ms),
            r.report.restarts_total.to_string(),
            r.report.rollbacks_total.to_string(),
            r.status.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_fig2(table: &Table, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["k", "protocol", "avg_exec_time", "status"]).map_err(csv_err)?;
    for r in table.of(SweepKind::Constraints).filter(|r| r.status != RowStatus::VerifyFailed) {
        out.write_record([
            r.x.to_string(),
            r.protocol.to_string(),
            format!("{:.3}", r.report.avg_exec_time_ms),
            r.status.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes both figure tables into `dir`.
pub fn emit_plotdata(table: &Table, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_fig1(table, std::fs::File::create(dir.join(FIG1_FILE))?)?;
    write_fig2(table, std::fs::File::create(dir.join(FIG2_FILE))?)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenParams {
        GenParams {
            accounts: 60,
            txs: 40,
            ..GenParams::default()
        }
    }

    fn csv_string(f: impl Fn(&Table, &mut Vec<u8>) -> Result<()>, t: &Table) -> String {
        let mut buf = Vec::new();
        f(t, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_sweep_writes_headers_only() {
        let t = Table::default();
        assert_eq!(
            csv_string(|t, b| write_fig1(t, b), &t),
            "shard_count,protocol,throughput,avg_exec_time,restarts,rollbacks,status\n"
        );
        assert_eq!(csv_string(|t, b| write_fig2(t, b), &t), "k,protocol,avg_exec_time,status\n");
    }

    #[test]
    fn shard_sweep_has_three_series_of_four() {
        let wl = generate(&small()).unwrap();
        let t = sweep_shards(&RunConfig::default(), &wl, &DEFAULT_SHARD_COUNTS, &Protocol::ALL).unwrap();
        assert_eq!(t.rows.len(), 12);
        for p in Protocol::ALL {
            let xs: Vec<u64> = t.of(SweepKind::Shards).filter(|r| r.protocol == p).map(|r| r.x).collect();
            assert_eq!(xs, vec![2, 4, 8, 16]);
        }
        assert!(t.rows.iter().all(Row::ok));
        let csv = csv_string(|t, b| write_fig1(t, b), &t);
        assert_eq!(csv.lines().count(), 13);
        for r in &t.rows {
            assert_eq!(r.verification.is_some(), r.protocol != Protocol::Nolock);
            assert_eq!(r.report.shard_count as u64, r.x);
        }
    }

    #[test]
    fn constraint_sweep_rows_and_determinism() {
        let ks = [1, 2, 4, 6, 8];
        let a = sweep_constraints(&RunConfig::default(), &small(), &ks, &Protocol::ALL).unwrap();
        assert_eq!(a.rows.len(), 15);
        let b = sweep_constraints(&RunConfig::default(), &small(), &ks, &Protocol::ALL).unwrap();
        assert_eq!(csv_string(|t, b| write_fig2(t, b), &a), csv_string(|t, b| write_fig2(t, b), &b));
        assert!(a.get(SweepKind::Constraints, 6, Protocol::Locked).is_some());
    }

    #[test]
    fn non_quiescent_row_is_flagged() {
        let wl = generate(&small()).unwrap();
        let base = RunConfig {
            horizon_ms: 50,
            ..RunConfig::default()
        };
        let t = sweep_shards(&base, &wl, &[2], &[Protocol::Lockless]).unwrap();
        assert_eq!(t.rows[0].status, RowStatus::NonQuiescent);
        let csv = csv_string(|t, b| write_fig1(t, b), &t);
        assert!(csv.lines().nth(1).unwrap().ends_with(",non_quiescent"));
    }
}
