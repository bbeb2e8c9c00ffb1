use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{EventQueue, Network};
use super::sim::{id_name, sim_node_name, stream_seed};
use super::topology::{generate_topology, ms_to_ns, Hop, Nanos, SimTopology, TopologyParams, NS_PER_MS};
use super::SimError;
use crate::clock::ManualClock;
use crate::qtree::{next_hop, node_id_from_name, NodeId, BASE};
use crate::sensact::{AppKnobs, Ledger, SensorServer, SetLossActuator, SetWorkloadActuator};

/// The member responsible for `key`: digit by digit, keep the members
/// carrying the key's digit, or the next digit up (mod 4) when none do.
pub fn surrogate_owner<'a>(key: &NodeId, members: &'a [NodeId]) -> Option<&'a NodeId> {
    let mut candidates: Vec<&NodeId> = members.iter().collect();
    for level in 0..key.len() {
        if candidates.len() <= 1 {
            break;
        }
        for step in 0..BASE {
            let d = (key.digit(level) + step) % BASE;
            let next: Vec<&NodeId> = candidates.iter().copied().filter(|m| m.digit(level) == d).collect();
            if !next.is_empty() {
                candidates = next;
                break;
            }
        }
    }
    candidates.into_iter().min()
}

/// A live actuator call applied to every app instance at a given time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedInvocation {
    pub at_ms: u64,
    /// Actuator path and arguments, e.g. `/setworkload?period_ms=5000`.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LookupParams {
    pub nodes: usize,
    pub minutes: u64,
    pub period_ms: u64,
    pub drop_fraction: f64,
    pub timeout_ms: u64,
    /// Size of the key pool; lookups for one key recur within a minute so a
    /// majority owner exists.
    pub keys: usize,
    /// CPU time an instance spends on each lookup message.
    pub service_ms: f64,
    pub message_size: u64,
    pub id_digits: usize,
    pub invocations: Vec<TimedInvocation>,
}

impl Default for LookupParams {
    fn default() -> Self {
        LookupParams {
            nodes: 512,
            minutes: 30,
            period_ms: 20_000,
            drop_fraction: 0.0,
            timeout_ms: 10_000,
            keys: 64,
            service_ms: 20.0,
            message_size: 100,
            id_digits: crate::qtree::DEFAULT_DIGITS,
            invocations: Vec::new(),
        }
    }
}

impl LookupParams {
    fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, why: &str| Err(SimError::Config { field: format!("lookup.{field}"), reason: why.into() });
        if self.nodes == 0 {
            return bad("nodes", "must be at least 1");
        }
        if self.period_ms == 0 {
            return bad("period_ms", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.drop_fraction) {
            return bad("drop_fraction", "must be within [0, 1]");
        }
        if self.keys == 0 {
            return bad("keys", "must be at least 1");
        }
        if !(self.service_ms >= 0.0 && self.service_ms.is_finite()) {
            return bad("service_ms", "must be a non-negative number");
        }
        if self.message_size == 0 {
            return bad("message_size", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupRecord {
    pub origin: usize,
    pub key: usize,
    pub issued_ns: Nanos,
    pub done_ns: Option<Nanos>,
    pub owner: Option<usize>,
}

impl LookupRecord {
    pub fn completed(&self, timeout_ns: Nanos) -> bool {
        self.done_ns.is_some_and(|d| d - self.issued_ns <= timeout_ns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupMinute {
    pub minute: u64,
    pub issued: usize,
    pub completed: usize,
    pub successful: usize,
    pub completion_rate: f64,
    pub success_rate: f64,
    pub mean_latency_ms: f64,
}

#[derive(Clone, Copy)]
enum Kind {
    Forward,
    Reply { owner: usize },
}

struct Msg {
    lookup: usize,
    to: usize,
    kind: Kind,
    path: Arc<[Hop]>,
}

enum Event {
    Issue { node: usize },
    Link { msg: Box<Msg>, hop: usize },
    Arrive { msg: Box<Msg> },
    Handle { node: usize, lookup: usize, kind: Kind },
    Invoke { path: String },
}

struct Instance {
    router: usize,
    knobs: Arc<AppKnobs>,
    server: SensorServer,
    rng: ChaCha8Rng,
    cpu_busy: Nanos,
}

/// Synthetic lookup service over the prefix-routing substrate: every
/// instance periodically resolves a key by routing toward its owner, which
/// replies straight to the origin.
pub struct LookupSim {
    params: LookupParams,
    net: Network,
    queue: EventQueue<Event>,
    clock: ManualClock,
    instances: Vec<Instance>,
    ids: Vec<NodeId>,
    members: BTreeSet<NodeId>,
    index: HashMap<NodeId, usize>,
    latency_ms: Vec<f64>,
    key_owner: Vec<usize>,
    hops: HashMap<(usize, usize), usize>,
    records: Vec<LookupRecord>,
    ledger: Arc<Ledger>,
}

impl LookupSim {
    pub fn new(topo: Arc<SimTopology>, params: LookupParams, seed: u64) -> Result<Self, SimError> {
        params.validate()?;
        let n = params.nodes;
        if n > topo.hosts.len() {
            return Err(SimError::Config {
                field: "lookup.nodes".into(),
                reason: format!("{n} nodes but only {} stub hosts", topo.hosts.len()),
            });
        }
        let mut net = Network::new(topo.clone());
        let clock = ManualClock::new(0);
        let ledger = Arc::new(Ledger::in_memory(clock.as_now_fn()));
        let ids = (0..n)
            .map(|i| node_id_from_name(&id_name(seed, &sim_node_name(i)), params.id_digits))
            .collect::<Result<Vec<_>, _>>()?;
        let index: HashMap<NodeId, usize> = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        let routers = &topo.hosts[..n];
        let mut latency_ms = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                latency_ms[i * n + j] = net.routes().latency_ns(routers[i], routers[j]) as f64 / NS_PER_MS as f64;
            }
        }
        let mut instances = Vec::with_capacity(n);
        for (i, &router) in routers.iter().enumerate() {
            let knobs = Arc::new(AppKnobs::new(params.drop_fraction, params.period_ms));
            let mut server = SensorServer::new();
            let dup = |e: crate::sensact::SensactError| SimError::Runtime(e.to_string());
            server
                .register("setloss", Arc::new(SetLossActuator { knobs: knobs.clone(), ledger: ledger.clone() }))
                .map_err(dup)?;
            server
                .register("setworkload", Arc::new(SetWorkloadActuator { knobs: knobs.clone(), ledger: ledger.clone() }))
                .map_err(dup)?;
            instances.push(Instance {
                router,
                knobs,
                server,
                rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, (1 << 32) + i as u64)),
                cpu_busy: 0,
            });
        }
        let mut key_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX));
        let key_owner = (0..params.keys)
            .map(|_| {
                let digits = (0..params.id_digits).map(|_| key_rng.random_range(0..BASE)).collect();
                let key = NodeId::from_digits(digits).expect("digits in range");
                index[surrogate_owner(&key, &ids).expect("non-empty membership")]
            })
            .collect();
        let mut queue = EventQueue::new();
        for (i, inst) in instances.iter_mut().enumerate() {
            let phase = inst.rng.random_range(0..params.period_ms.max(1));
            queue.push(phase * NS_PER_MS, Event::Issue { node: i });
        }
        for inv in &params.invocations {
            queue.push(inv.at_ms * NS_PER_MS, Event::Invoke { path: inv.path.clone() });
        }
        Ok(LookupSim {
            members: ids.iter().cloned().collect(),
            params,
            net,
            queue,
            clock,
            instances,
            ids,
            index,
            latency_ms,
            key_owner,
            hops: HashMap::new(),
            records: Vec::new(),
            ledger,
        })
    }

    pub fn knobs(&self, node: usize) -> &Arc<AppKnobs> {
        &self.instances[node].knobs
    }

    pub fn records(&self) -> &[LookupRecord] {
        &self.records
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.ledger
    }

    /// Runs until `minutes` of lookups have been issued and answered or
    /// timed out.
    pub fn run(&mut self) {
        let end_issue = self.params.minutes * 60_000 * NS_PER_MS;
        let end = end_issue + self.params.timeout_ms * NS_PER_MS;
        while let Some((at, ev)) = self.queue.pop_until(end) {
            self.clock.set(at / NS_PER_MS);
            if let Event::Issue { .. } = ev {
                if at >= end_issue {
                    continue;
                }
            }
            self.handle(at, ev);
        }
    }

    fn next_hop(&mut self, at: usize, owner: usize) -> usize {
        if let Some(h) = self.hops.get(&(at, owner)) {
            return *h;
        }
        let n = self.ids.len();
        let (index, lat) = (&self.index, &self.latency_ms);
        let hop = next_hop(&self.ids[at], &self.ids[owner], &self.members, |a, b| lat[index[a] * n + index[b]])
            .map(|id| self.index[&id])
            .expect("members are consistent");
        self.hops.insert((at, owner), hop);
        hop
    }

    fn send(&mut self, now: Nanos, from: usize, msg: Msg) {
        let path = self.net.path(self.instances[from].router, self.instances[msg.to].router);
        let msg = Box::new(Msg { path, ..msg });
        if msg.path.is_empty() {
            self.queue.push(now, Event::Arrive { msg });
        } else {
            self.queue.push(now, Event::Link { msg, hop: 0 });
        }
    }

    fn enqueue_cpu(&mut self, now: Nanos, node: usize, lookup: usize, kind: Kind) {
        let inst = &mut self.instances[node];
        let done = now.max(inst.cpu_busy) + ms_to_ns(self.params.service_ms);
        inst.cpu_busy = done;
        self.queue.push(done, Event::Handle { node, lookup, kind });
    }

    fn handle(&mut self, now: Nanos, ev: Event) {
        match ev {
            Event::Issue { node } => {
                let key = self.instances[node].rng.random_range(0..self.key_owner.len());
                self.records.push(LookupRecord { origin: node, key, issued_ns: now, done_ns: None, owner: None });
                let lookup = self.records.len() - 1;
                self.enqueue_cpu(now, node, lookup, Kind::Forward);
                let period = self.instances[node].knobs.lookup_period_ms();
                self.queue.push(now + period * NS_PER_MS, Event::Issue { node });
            }
            Event::Link { msg, hop } => {
                let arrival = self.net.transmit(now, msg.path[hop], self.params.message_size);
                if hop + 1 < msg.path.len() {
                    self.queue.push(arrival, Event::Link { msg, hop: hop + 1 });
                } else {
                    self.queue.push(arrival, Event::Arrive { msg });
                }
            }
            Event::Arrive { msg } => {
                let inst = &mut self.instances[msg.to];
                let p = inst.knobs.drop_fraction();
                if p > 0.0 && inst.rng.random_bool(p) {
                    return;
                }
                self.enqueue_cpu(now, msg.to, msg.lookup, msg.kind);
            }
            Event::Handle { node, lookup, kind } => match kind {
                Kind::Forward => {
                    let owner = self.key_owner[self.records[lookup].key];
                    let (to, kind) = if node == owner {
                        (self.records[lookup].origin, Kind::Reply { owner })
                    } else {
                        (self.next_hop(node, owner), Kind::Forward)
                    };
                    self.send(now, node, Msg { lookup, to, kind, path: Arc::from([]) });
                }
                Kind::Reply { owner } => {
                    let r = &mut self.records[lookup];
                    if r.done_ns.is_none() {
                        r.done_ns = Some(now);
                        r.owner = Some(owner);
                    }
                }
            },
            Event::Invoke { path } => {
                for inst in &self.instances {
                    let resp = inst.server.serve_sensor_request(&path);
                    if resp.status != 200 {
                        log::warn!("invocation {path} failed with status {}", resp.status);
                    }
                }
            }
        }
    }

    /// Per-minute completion, success and latency, bucketed by issue time.
    pub fn metrics(&self) -> Vec<LookupMinute> {
        let timeout = self.params.timeout_ms * NS_PER_MS;
        let minute_ns = 60_000 * NS_PER_MS;
        let mut buckets: BTreeMap<u64, Vec<&LookupRecord>> = BTreeMap::new();
        for m in 0..self.params.minutes {
            buckets.insert(m, Vec::new());
        }
        for r in &self.records {
            buckets.entry(r.issued_ns / minute_ns).or_default().push(r);
        }
        buckets
            .into_iter()
            .map(|(minute, rs)| {
                let done: Vec<&&LookupRecord> = rs.iter().filter(|r| r.completed(timeout)).collect();
                let mut votes: HashMap<usize, BTreeMap<usize, usize>> = HashMap::new();
                for r in &done {
                    *votes.entry(r.key).or_default().entry(r.owner.unwrap()).or_default() += 1;
                }
                let majority = |key: usize| {
                    votes[&key].iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(o, _)| *o)
                };
                let successful = done.iter().filter(|r| r.owner == majority(r.key)).count();
                let latency: f64 = done.iter().map(|r| (r.done_ns.unwrap() - r.issued_ns) as f64 / 1e6).sum();
                let issued = rs.len();
                LookupMinute {
                    minute,
                    issued,
                    completed: done.len(),
                    successful,
                    completion_rate: if issued == 0 { 0.0 } else { done.len() as f64 / issued as f64 },
                    success_rate: if done.is_empty() { 0.0 } else { successful as f64 / done.len() as f64 },
                    mean_latency_ms: if done.is_empty() { 0.0 } else { latency / done.len() as f64 },
                }
            })
            .collect()
    }
}

/// Builds a topology, runs the app and returns its per-minute metrics.
pub fn run_lookup_experiment(
    seed: u64,
    topology: &TopologyParams,
    params: &LookupParams,
) -> Result<Vec<LookupMinute>, SimError> {
    let tp = TopologyParams { min_stub_hosts: topology.min_stub_hosts.max(params.nodes), ..topology.clone() };
    let topo = Arc::new(generate_topology(seed, &tp)?);
    let mut sim = LookupSim::new(topo, params.clone(), seed)?;
    sim.run();
    Ok(sim.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p: LookupParams) -> Vec<LookupMinute> {
        let tp = TopologyParams { min_stub_hosts: 64, ..Default::default() };
        run_lookup_experiment(3, &tp, &LookupParams { nodes: 64, minutes: 4, keys: 8, ..p }).unwrap()
    }

    #[test]
    fn owner_is_a_member_and_exact_ids_own_themselves() {
        let ids: Vec<NodeId> = (0..50).map(|i| node_id_from_name(&format!("n{i}"), 8).unwrap()).collect();
        for id in &ids {
            assert_eq!(surrogate_owner(id, &ids), Some(id));
        }
        let key = NodeId::from_digits(vec![0; 8]).unwrap();
        assert!(ids.contains(surrogate_owner(&key, &ids).unwrap()));
    }

    #[test]
    fn lossless_static_network_always_succeeds() {
        for m in small(LookupParams::default()) {
            assert!(m.issued > 0);
            assert_eq!(m.completion_rate, 1.0, "{m:?}");
            assert_eq!(m.success_rate, 1.0);
        }
    }

    #[test]
    fn dropping_everything_completes_nothing() {
        for m in small(LookupParams { drop_fraction: 1.0, ..Default::default() }) {
            assert_eq!(m.completed, 0);
        }
    }

    #[test]
    fn workload_actuator_changes_the_rate() {
        let inv = TimedInvocation { at_ms: 120_000, path: "/setworkload?period_ms=5000".into() };
        let ms = small(LookupParams { invocations: vec![inv], ..Default::default() });
        // 64 instances every 20 s is 192 a minute; every 5 s is 768
        assert_eq!(ms[0].issued, 192);
        assert_eq!(ms[3].issued, 768);
    }
}
