use std::cell::RefCell;
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::sim::{SensorBackend, Sim};
use crate::clock::ManualClock;
use crate::entrie::{combine_acks, Executor, Invocation, NodeSpec, SensorFetch, SensorSource, Target};
use crate::ising::{AggregateOp, HostScope, ResultTuple, SensorQuery};
use crate::qtree::TopologyKind;
use crate::sensact::{ActuatorResult, SensorServer, VirtualProcesses};

/// A load value held by one node over `[from_ms, to_ms)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpike {
    pub node: usize,
    pub from_ms: u64,
    pub to_ms: u64,
    pub value: f64,
}

/// Scripted per-node load: a baseline plus spikes. Later spikes win.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadScript {
    pub baseline: f64,
    pub spikes: Vec<LoadSpike>,
}

impl LoadScript {
    pub fn value(&self, node: usize, t_ms: u64) -> f64 {
        self.spikes
            .iter()
            .rev()
            .find(|s| s.node == node && (s.from_ms..s.to_ms).contains(&t_ms))
            .map_or(self.baseline, |s| s.value)
            .max(0.0)
    }
}

/// Sensor data for trigger runs: `load` follows a script, everything else
/// (actuators included) goes to the node's in-memory sensor server.
pub struct ServerBackend {
    pub servers: Vec<Arc<SensorServer>>,
    pub loads: Option<LoadScript>,
}

impl SensorBackend for ServerBackend {
    fn fetch(&mut self, node: usize, _port: u16, name: &str, now_ms: u64) -> Result<String, String> {
        if let (Some(script), "load") = (&self.loads, name) {
            return Ok(format!("{}\n", script.value(node, now_ms)));
        }
        let server = self.servers.get(node).ok_or_else(|| format!("no node {node}"))?;
        let resp = server.serve_sensor_request(&format!("/{name}"));
        let status = resp.status;
        let body = resp.into_text();
        if status == 200 {
            Ok(body)
        } else {
            Err(format!("HTTP {status}: {}", body.trim()))
        }
    }
}

fn host_of(node: &str) -> &str {
    node.rsplit_once(':').map_or(node, |(h, _)| h)
}

/// Trigger-engine plumbing over a simulation: ALL-node sensor conditions
/// are ISING snapshot queries in the simulated network, and ALL-node
/// actuators are VALUE snapshots on the actuator name.
#[derive(Clone)]
pub struct SimControl {
    pub sim: Rc<RefCell<Sim>>,
    /// Servers addressed by node index, for direct `host:port` calls.
    pub servers: Vec<Arc<SensorServer>>,
    pub local: Option<Arc<SensorServer>>,
    pub kind: TopologyKind,
    /// Set to the trigger clock before each invocation so ledgers record
    /// virtual time.
    pub clock: Option<ManualClock>,
}

impl SimControl {
    fn catch_up(&self, now_ms: u64) {
        let mut sim = self.sim.borrow_mut();
        let t = now_ms * super::NS_PER_MS;
        if sim.now() < t {
            sim.run_until(t);
        }
    }

    fn snapshot(&self, port: u16, sensor: &str, op: AggregateOp, now_ms: u64) -> Result<Vec<ResultTuple>, String> {
        self.catch_up(now_ms);
        let mut sim = self.sim.borrow_mut();
        let q = SensorQuery::new(port, sensor, HostScope::All, op, 0);
        let o = sim.snapshot(&q, self.kind).map_err(|e| e.to_string())?;
        let root = sim.node_name(0).to_owned();
        Ok(o.partial.finalize(&root, now_ms))
    }
}

impl SensorSource for SimControl {
    fn fetch(&mut self, now_ms: u64, req: &SensorFetch<'_>) -> Result<Vec<ResultTuple>, String> {
        match req.node {
            NodeSpec::All { port } => self.snapshot(*port, req.sensor, req.op, now_ms),
            NodeSpec::Host { host, port } => {
                self.catch_up(now_ms);
                let mut sim = self.sim.borrow_mut();
                let node = sim.node_index(host).ok_or_else(|| format!("unknown node {host}"))?;
                let body = sim.fetch_local(node, *port, req.sensor)?;
                let source = format!("{host}:{port}");
                Ok(body
                    .lines()
                    .filter(|l| !l.is_empty())
                    .map(|l| ResultTuple::new(source.clone(), now_ms, l))
                    .collect())
            }
            NodeSpec::Variable { .. } => Err("sensor conditions cannot target VARIABLE_host".into()),
        }
    }
}

fn call(server: &SensorServer, path: &str) -> ActuatorResult {
    let resp = server.serve_sensor_request(path);
    let status = resp.status;
    let body = resp.into_text();
    if status != 200 {
        return ActuatorResult::error(format!("HTTP {status}: {}", body.trim()));
    }
    ActuatorResult::parse(&body).unwrap_or_else(|| ActuatorResult::error(format!("unreadable ack {body:?}")))
}

impl Executor for SimControl {
    fn invoke(&mut self, now_ms: u64, inv: &Invocation) -> ActuatorResult {
        if let Some(c) = &self.clock {
            c.set(now_ms);
        }
        let name = if inv.args.is_empty() { inv.actuator.clone() } else { format!("{}?{}", inv.actuator, inv.args) };
        match &inv.target {
            Target::Local => match &self.local {
                Some(s) => call(s, &format!("/{name}")),
                None => ActuatorResult::error("no local actuator server"),
            },
            Target::Node(n) => {
                let idx = self.sim.borrow().node_index(host_of(n));
                match idx.and_then(|i| self.servers.get(i)) {
                    Some(s) => call(s, &format!("/{name}")),
                    None => ActuatorResult::error(format!("unknown node {n}")),
                }
            }
            Target::All { port } => match self.snapshot(*port, &name, AggregateOp::Value, now_ms) {
                Ok(tuples) => combine_acks(&tuples),
                Err(e) => ActuatorResult::error(e),
            },
        }
    }
}

/// Per-node virtual process managers, kept concrete so callers can read
/// restart counts after a run.
pub type NodeProcesses = Vec<Arc<Mutex<VirtualProcesses>>>;

/// A fresh virtual process manager per node.
pub fn virtual_processes(n: usize) -> NodeProcesses {
    (0..n).map(|_| Arc::new(Mutex::new(VirtualProcesses::new()))).collect()
}
