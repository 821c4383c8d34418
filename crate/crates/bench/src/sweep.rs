//! Multi-run studies: throughput as shards are added, and how evenly one
//! shard splits its throughput between clients.

use serde::{Deserialize, Serialize};

use crate::coordinator::{run_bench, Launch, LocalCluster};
use crate::report::Report;
use crate::workload::WorkloadSpec;
use crate::BenchError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub shards: u32,
    pub clients: u32,
    pub aggregate_ops_per_sec: f64,
    /// `shards` times the one-shard aggregate.
    pub linear_ops_per_sec: f64,
    /// Shortfall from the linear projection: `1 - aggregate / linear`.
    pub degradation: f64,
}

/// Degradation from linear scaling of `aggregate` at `shards`, given the
/// one-shard aggregate `base`.
pub fn degradation(base: f64, shards: u32, aggregate: f64) -> f64 {
    let linear = base * f64::from(shards);
    if linear <= 0.0 {
        0.0
    } else {
        1.0 - aggregate / linear
    }
}

/// Table rows from (shards, clients, aggregate) measurements; the first
/// measurement must be the one-shard run.
pub fn scaling_table(runs: &[(u32, u32, f64)]) -> Vec<ScalingRow> {
    let base = runs.first().map_or(0.0, |r| r.2 / f64::from(r.0));
    runs.iter()
        .map(|&(shards, clients, agg)| ScalingRow {
            shards,
            clients,
            aggregate_ops_per_sec: agg,
            linear_ops_per_sec: base * f64::from(shards),
            degradation: degradation(base, shards, agg),
        })
        .collect()
}

/// Run `spec` on 1..=`max_shards` local shards, `spec.clients` clients per
/// shard. Returns the table and the per-run reports.
pub fn scaling_sweep(spec: &WorkloadSpec, max_shards: u32, launch: &Launch) -> Result<(Vec<ScalingRow>, Vec<Report>), BenchError> {
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for shards in 1..=max_shards {
        let s = WorkloadSpec { shards, clients: spec.clients * shards, ..spec.clone() };
        let cluster = LocalCluster::for_spec(&s)?;
        let r = run_bench(&s, &cluster.addrs(), launch)?;
        runs.push((shards, s.clients, r.aggregate_ops_per_sec));
        reports.push(r);
    }
    Ok((scaling_table(&runs), reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessRow {
    pub clients: u32,
    pub per_client_ops_per_sec: Vec<f64>,
    pub aggregate_ops_per_sec: f64,
    /// Slowest client over fastest.
    pub min_max_ratio: f64,
    /// Largest relative distance of any client's share from 1/clients.
    pub max_share_deviation: f64,
}

pub fn fairness_row(per_client: &[f64]) -> FairnessRow {
    let n = per_client.len();
    let total: f64 = per_client.iter().sum();
    let min = per_client.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_client.iter().copied().fold(0.0, f64::max);
    let fair = 1.0 / n as f64;
    let dev = if total > 0.0 { per_client.iter().map(|r| ((r / total) - fair).abs() / fair).fold(0.0, f64::max) } else { 0.0 };
    FairnessRow {
        clients: n as u32,
        per_client_ops_per_sec: per_client.to_vec(),
        aggregate_ops_per_sec: total,
        min_max_ratio: if max > 0.0 { min / max } else { 0.0 },
        max_share_deviation: dev,
    }
}

/// 1..=`max_clients` clients against a single shard. Every run should be
/// duration-bound, so that all clients compete for the same window.
pub fn fairness(spec: &WorkloadSpec, max_clients: u32, launch: &Launch) -> Result<Vec<FairnessRow>, BenchError> {
    let mut rows = Vec::new();
    for clients in 1..=max_clients {
        let s = WorkloadSpec { shards: 1, clients, ..spec.clone() };
        let cluster = LocalCluster::for_spec(&s)?;
        let r = run_bench(&s, &cluster.addrs(), launch)?;
        if !r.failures.is_empty() {
            return Err(BenchError::Worker(r.failures.join("; ")));
        }
        rows.push(fairness_row(&r.clients.iter().map(|c| c.ops_per_sec).collect::<Vec<_>>()));
    }
    Ok(rows)
}
