//! Browser bindings: a single run, a shard sweep and a traced fixture, each
//! returning JSON for the static page in `www/`.

use lockless_shard::bench::{sweep_shards, SweepKind};
use lockless_shard::verifier::verify_run;
use lockless_shard::workload::{fixtures, generate};
use lockless_shard::{GenParams, Protocol, RunConfig, Workload};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DemoParams {
    pub shards: u32,
    pub protocol: Protocol,
    pub accounts: usize,
    pub txs: usize,
    pub constraints: usize,
    pub seed: u64,
    pub pipeline_depth: usize,
    pub delta1: u64,
    pub delta3: u64,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self {
            shards: 4,
            protocol: Protocol::Lockless,
            accounts: 200,
            txs: 300,
            constraints: 4,
            seed: 1,
            pipeline_depth: 8,
            delta1: 5,
            delta3: 30,
        }
    }
}

impl DemoParams {
    fn config(&self) -> RunConfig {
        RunConfig {
            shards: self.shards,
            protocol: self.protocol,
            seed: self.seed,
            pipeline_depth: self.pipeline_depth,
            delta1: self.delta1,
            delta3: self.delta3,
            ..RunConfig::default()
        }
    }

    fn workload(&self) -> Result<Workload, String> {
        let wl = generate(&GenParams {
            accounts: self.accounts,
            txs: self.txs,
            constraints: self.constraints,
            seed: self.seed,
            shards: self.shards,
            ..GenParams::default()
        })
        .map_err(|e| e.to_string())?;
        Ok(wl.with_leaders(self.shards))
    }
}

fn parse(params: &str) -> Result<DemoParams, String> {
    if params.trim().is_empty() {
        return Ok(DemoParams::default());
    }
    serde_json::from_str(params).map_err(|e| format!("bad parameters: {e}"))
}

#[derive(Serialize)]
struct Summary {
    protocol: Protocol,
    shards: u32,
    committed: usize,
    discarded: usize,
    throughput: f64,
    avg_exec_time_ms: f64,
    restarts: u64,
    rollbacks: u64,
    sim_duration_ms: u64,
    total_balance: i64,
    messages: u64,
}

pub fn simulate_json(params: &str) -> Result<String, String> {
    let p = parse(params)?;
    let wl = p.workload()?;
    let out = lockless_shard::run(&p.config(), &wl).map_err(|e| e.to_string())?;
    let r = &out.report;
    let v = verify_run(&out, &wl);
    let body = json!({
        "summary": Summary {
            protocol: r.protocol,
            shards: r.shard_count,
            committed: r.committed,
            discarded: r.discarded,
            throughput: r.throughput,
            avg_exec_time_ms: r.avg_exec_time_ms,
            restarts: r.restarts_total,
            rollbacks: r.rollbacks_total,
            sim_duration_ms: r.sim_duration_ms,
            total_balance: r.total_balance(),
            messages: r.messages_total,
        },
        "quiesced": r.quiesced,
        "verification": {
            "valid": v.valid,
            "shard_coherent": v.shard_coherent,
            "replay_match": v.replay_match,
            "serialized": v.serialization.len(),
            "violations": v.violations.iter().take(5).collect::<Vec<_>>(),
        },
    });
    Ok(body.to_string())
}

pub fn sweep_json(params: &str, shard_counts: &[u32]) -> Result<String, String> {
    let p = parse(params)?;
    let wl = p.workload()?;
    let table = sweep_shards(&p.config(), &wl, shard_counts, &Protocol::ALL).map_err(|e| e.to_string())?;
    let rows: Vec<Value> = table
        .of(SweepKind::Shards)
        .map(|r| {
            json!({
                "shards": r.x,
                "protocol": r.protocol,
                "throughput": r.report.throughput,
                "avg_exec_time_ms": r.report.avg_exec_time_ms,
                "status": r.status.as_str(),
            })
        })
        .collect();
    Ok(Value::Array(rows).to_string())
}

/// Message trace and chains of a hand-built scenario: "one" is the single
/// three-account transfer, "two" adds a conflicting transfer out of Asma.
pub fn trace_json(fixture: &str, protocol: &str) -> Result<String, String> {
    let protocol: Protocol = protocol.parse().map_err(|e: lockless_shard::Error| e.to_string())?;
    let (wl, shards) = match fixture {
        "one" => (fixtures::example_one(), 3),
        "two" => (fixtures::example_two(6000, 3), 4),
        other => return Err(format!("unknown fixture {other:?}")),
    };
    let cfg = RunConfig {
        shards,
        protocol,
        trace: true,
        ..RunConfig::default()
    };
    let out = lockless_shard::run(&cfg, &wl).map_err(|e| e.to_string())?;
    let body = json!({
        "trace": out.trace,
        "chains": out.chain_dumps(),
        "final_balances": out.report.final_balances,
        "per_tx": out.report.per_tx,
    });
    Ok(body.to_string())
}

/// One run on a generated workload; `params` is a JSON object of
/// `DemoParams` fields, any of which may be omitted.
#[wasm_bindgen]
pub fn simulate(params: &str) -> Result<String, JsValue> {
    simulate_json(params).map_err(|e| JsValue::from_str(&e))
}

/// Throughput of all three protocols at each shard count.
#[wasm_bindgen]
pub fn sweep(params: &str, shard_counts: &[u32]) -> Result<String, JsValue> {
    sweep_json(params, shard_counts).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn trace(fixture: &str, protocol: &str) -> Result<String, JsValue> {
    trace_json(fixture, protocol).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_defaults_and_overrides() {
        let v: Value = serde_json::from_str(&simulate_json(r#"{"txs": 40, "accounts": 50, "protocol": "locked"}"#).unwrap()).unwrap();
        assert_eq!(v["summary"]["protocol"], "locked");
        assert_eq!(v["summary"]["total_balance"], 150_000);
        assert_eq!(v["verification"]["valid"], true);
        assert!(simulate_json("{nope").is_err());
    }

    #[test]
    fn sweep_rows() {
        let v: Value = serde_json::from_str(&sweep_json(r#"{"txs": 30, "accounts": 40}"#, &[2, 4]).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 6);
    }

    #[test]
    fn example_one_trace() {
        let v: Value = serde_json::from_str(&trace_json("one", "lockless").unwrap()).unwrap();
        assert_eq!(v["final_balances"]["Rock"], 1000);
        assert_eq!(v["final_balances"]["Asma"], 2500);
        assert!(!v["trace"].as_array().unwrap().is_empty());
        assert!(trace_json("three", "lockless").is_err());
        assert!(trace_json("one", "paxos").is_err());
    }
}
