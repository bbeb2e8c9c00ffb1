use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sim::{InternalValues, Sim, SimParams};
use super::topology::{generate_topology, SimTopology, TopologyParams};
use super::SimError;
use crate::ising::{AggregateOp, HostScope, SensorQuery};
use crate::qtree::TopologyKind;

/// Port and sensor name used for internally generated values.
pub const VALUE_PORT: u16 = 9000;
pub const VALUE_SENSOR: &str = "value";

fn value_query(op: AggregateOp) -> SensorQuery {
    SensorQuery::new(VALUE_PORT, VALUE_SENSOR, HostScope::All, op, 0)
}

/// Median of `xs`; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Least-squares slope of `y` over `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Shared inputs of the tree experiments.
#[derive(Debug, Clone)]
pub struct Setup {
    pub seed: u64,
    pub topology: TopologyParams,
    pub sim: SimParams,
}

impl Setup {
    pub fn new(seed: u64) -> Self {
        Setup { seed, topology: TopologyParams::default(), sim: SimParams::default() }
    }

    fn topology_for(&self, n: usize) -> Result<Arc<SimTopology>, SimError> {
        let params = TopologyParams { min_stub_hosts: self.topology.min_stub_hosts.max(n), ..self.topology.clone() };
        Ok(Arc::new(generate_topology(self.seed, &params)?))
    }

    fn sim(&self, topo: Arc<SimTopology>, n: usize, params: SimParams) -> Result<Sim, SimError> {
        Sim::new(topo, n, params, self.seed, Box::new(InternalValues { seed: self.seed }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub n: usize,
    pub topology: TopologyKind,
    pub op: AggregateOp,
    pub rep: usize,
    pub latency_ms: f64,
}

/// Runs each (size, tree, op) cell `reps` times in a fresh simulation, one
/// query after another, and records each end-to-end latency. Every size
/// shares one topology and one root.
pub fn run_latency_experiment(
    setup: &Setup,
    sizes: &[usize],
    kinds: &[TopologyKind],
    ops: &[AggregateOp],
    reps: usize,
) -> Result<Vec<LatencyRow>, SimError> {
    let largest = sizes.iter().copied().max().unwrap_or(1);
    let topo = setup.topology_for(largest)?;
    let mut rows = Vec::new();
    for &n in sizes {
        for &kind in kinds {
            for &op in ops {
                let mut sim = setup.sim(topo.clone(), n, setup.sim.clone())?;
                for rep in 0..reps {
                    let o = sim.snapshot(&value_query(op), kind)?;
                    rows.push(LatencyRow { n, topology: kind, op, rep, latency_ms: o.latency_ms() });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummaryRow {
    pub n: usize,
    pub topology: TopologyKind,
    pub op: AggregateOp,
    pub reps: usize,
    pub median_latency_ms: f64,
}

/// Per-cell medians, in first-appearance order.
pub fn summarize_latency(rows: &[LatencyRow]) -> Vec<LatencySummaryRow> {
    let mut keys: Vec<(usize, TopologyKind, AggregateOp)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.n, r.topology, r.op)) {
            keys.push((r.n, r.topology, r.op));
        }
    }
    keys.into_iter()
        .map(|(n, topology, op)| {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| (r.n, r.topology, r.op) == (n, topology, op))
                .map(|r| r.latency_ms)
                .collect();
            LatencySummaryRow { n, topology, op, reps: xs.len(), median_latency_ms: median(&xs).unwrap_or(0.0) }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BytesRow {
    pub n: usize,
    pub topology: TopologyKind,
    pub op: AggregateOp,
    pub total_bytes: u64,
    pub link_bytes: u64,
    pub avg_depth: f64,
}

/// Bytes sent in computing one aggregate per (size, tree, op).
pub fn run_bytes_experiment(
    setup: &Setup,
    sizes: &[usize],
    kinds: &[TopologyKind],
    ops: &[AggregateOp],
) -> Result<Vec<BytesRow>, SimError> {
    let largest = sizes.iter().copied().max().unwrap_or(1);
    let topo = setup.topology_for(largest)?;
    let mut rows = Vec::new();
    for &n in sizes {
        for &kind in kinds {
            for &op in ops {
                let mut sim = setup.sim(topo.clone(), n, setup.sim.clone())?;
                let before = sim.bytes();
                sim.snapshot(&value_query(op), kind)?;
                sim.drain();
                let used = sim.bytes().since(&before);
                rows.push(BytesRow {
                    n,
                    topology: kind,
                    op,
                    total_bytes: used.total_bytes(),
                    link_bytes: used.link.link_bytes,
                    avg_depth: sim.tree(kind)?.stats().avg_depth,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub p: f64,
    pub n: usize,
    pub queries: usize,
    pub lossy: usize,
    pub lossy_fraction: f64,
    /// 1 - (1 - p)^n.
    pub expected_fraction: f64,
    pub mean_nodes_lost: f64,
}

/// Issues `queries` COUNT snapshots one after another over a TTREE of `n`
/// nodes for each loss probability.
pub fn run_loss_experiment(setup: &Setup, n: usize, p_list: &[f64], queries: usize) -> Result<Vec<LossRow>, SimError> {
    let topo = setup.topology_for(n)?;
    let mut rows = Vec::new();
    for &p in p_list {
        let mut sim = setup.sim(topo.clone(), n, SimParams { up_loss: p, ..setup.sim.clone() })?;
        let mut lost = Vec::new();
        for _ in 0..queries {
            let o = sim.snapshot(&value_query(AggregateOp::Count), TopologyKind::Prefix)?;
            let count = o.partial.scalar().unwrap_or(0.0) as usize;
            if count < n {
                lost.push((n - count) as f64);
            }
        }
        let mean = if lost.is_empty() { 0.0 } else { lost.iter().sum::<f64>() / lost.len() as f64 };
        rows.push(LossRow {
            p,
            n,
            queries,
            lossy: lost.len(),
            lossy_fraction: lost.len() as f64 / queries.max(1) as f64,
            expected_fraction: 1.0 - (1.0 - p).powi(n as i32),
            mean_nodes_lost: mean,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub seed: u64,
    pub n: usize,
    pub avg_depth: f64,
    pub max_depth: usize,
}

/// TTREE shape over `n` nodes for each seed. Each seed gets its own
/// topology and identifiers.
pub fn run_depth_experiment(setup: &Setup, n: usize, seeds: &[u64]) -> Result<Vec<DepthRow>, SimError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let s = Setup { seed, ..setup.clone() };
        let sim = s.sim(s.topology_for(n)?, n, s.sim.clone())?;
        let stats = sim.tree(TopologyKind::Prefix)?.stats();
        rows.push(DepthRow { seed, n, avg_depth: stats.avg_depth, max_depth: stats.max_depth });
    }
    Ok(rows)
}

/// Mean one-way latency of the parent edge of TTREE nodes at each depth.
pub fn parent_edge_latency_by_depth(sim: &Sim) -> Result<Vec<f64>, SimError> {
    let tree = sim.tree(TopologyKind::Prefix)?;
    let m = sim.membership();
    let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); tree.max_depth() + 1];
    for (child, parent) in &tree.parent {
        let d = tree.depth_of(child).unwrap_or(0);
        sums[d].0 += m.latency(child, parent);
        sums[d].1 += 1;
    }
    Ok(sums.into_iter().skip(1).map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_slope() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(fit_slope(&[(1.0, 3.0), (2.0, 5.0), (4.0, 9.0)]), Some(2.0));
    }

    #[test]
    fn small_grid_runs() {
        let mut setup = Setup::new(2);
        setup.topology.min_stub_hosts = 64;
        let rows = run_bytes_experiment(&setup, &[1, 16, 32], &[TopologyKind::Direct], &[AggregateOp::Min]).unwrap();
        assert_eq!(rows.iter().map(|r| r.total_bytes).collect::<Vec<_>>(), vec![100, 1600, 3200]);
        let lat = run_latency_experiment(&setup, &[8], &[TopologyKind::Prefix], &[AggregateOp::Median], 3).unwrap();
        assert_eq!(lat.len(), 3);
        let s = summarize_latency(&lat);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].reps, 3);
    }

    #[test]
    fn no_loss_no_lossy_responses() {
        let mut setup = Setup::new(4);
        setup.topology.min_stub_hosts = 32;
        let rows = run_loss_experiment(&setup, 32, &[0.0], 20).unwrap();
        assert_eq!(rows[0].lossy, 0);
        assert_eq!(rows[0].expected_fraction, 0.0);
    }
}
