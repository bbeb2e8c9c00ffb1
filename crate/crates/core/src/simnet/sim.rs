use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{EventQueue, LinkStats, Network};
use super::topology::{ms_to_ns, Hop, Nanos, SimTopology, NS_PER_MS};
use super::SimError;
use crate::ising::{
    sample_local, Action, IsingConfig, IsingNode, MessageClass, NodeCounters, PartialAggregate, SensorQuery, Timer,
};
use crate::qtree::{node_id_from_name, Frame, Membership, NodeId, QTree, TopologyKind, TreeId, TreeStructure};

/// Derives an independent RNG seed for stream `i` of a master seed.
pub fn stream_seed(master: u64, i: u64) -> u64 {
    // splitmix64
    let mut z = master ^ (i.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Bytes per value unit carried by a message.
    pub message_size: u64,
    /// CPU time to merge one value received from a child.
    pub merge_cost_ms: f64,
    /// Relative spread of each merge cost, drawn uniformly in ±jitter.
    pub merge_jitter: f64,
    /// Time for a node to read its local sensor.
    pub sample_latency_ms: f64,
    /// Probability of dropping each upward partial.
    pub up_loss: f64,
    pub compute_max_ms: u64,
    pub latency_max_ms: u64,
    pub max_depth: usize,
    pub id_digits: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        let ising = IsingConfig::default();
        SimParams {
            message_size: 100,
            merge_cost_ms: 1.0,
            merge_jitter: 0.0,
            sample_latency_ms: 0.0,
            up_loss: 0.0,
            compute_max_ms: ising.compute_max_ms,
            latency_max_ms: ising.latency_max_ms,
            max_depth: ising.max_depth,
            id_digits: crate::qtree::DEFAULT_DIGITS,
        }
    }
}

impl SimParams {
    fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, why: &str| Err(SimError::Config { field: format!("sim.{field}"), reason: why.into() });
        if self.message_size == 0 {
            return bad("message_size", "must be positive");
        }
        if !(self.merge_cost_ms >= 0.0 && self.merge_cost_ms.is_finite()) {
            return bad("merge_cost_ms", "must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.merge_jitter) {
            return bad("merge_jitter", "must be within [0, 1)");
        }
        if !(self.sample_latency_ms >= 0.0 && self.sample_latency_ms.is_finite()) {
            return bad("sample_latency_ms", "must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.up_loss) {
            return bad("up_loss", "must be within [0, 1]");
        }
        if self.max_depth == 0 {
            return bad("max_depth", "must be positive");
        }
        if self.id_digits == 0 {
            return bad("id_digits", "must be positive");
        }
        Ok(())
    }

    pub fn ising_config(&self) -> IsingConfig {
        IsingConfig { compute_max_ms: self.compute_max_ms, latency_max_ms: self.latency_max_ms, max_depth: self.max_depth }
    }
}

/// Local sensor data for simulated nodes: raw CSV for a sensor on `port` at
/// node `node`.
pub trait SensorBackend {
    fn fetch(&mut self, node: usize, port: u16, name: &str, now_ms: u64) -> Result<String, String>;
}

impl<F> SensorBackend for F
where
    F: FnMut(usize, u16, &str, u64) -> Result<String, String>,
{
    fn fetch(&mut self, node: usize, port: u16, name: &str, now_ms: u64) -> Result<String, String> {
        self(node, port, name, now_ms)
    }
}

/// Values generated inside each node instead of read from a sensor: every
/// sensor answers one integer fixed per node.
#[derive(Debug, Clone)]
pub struct InternalValues {
    pub seed: u64,
}

impl InternalValues {
    pub fn value(&self, node: usize) -> u64 {
        stream_seed(self.seed, node as u64) % 1000
    }
}

impl SensorBackend for InternalValues {
    fn fetch(&mut self, node: usize, _port: u16, _name: &str, _now_ms: u64) -> Result<String, String> {
        Ok(format!("{}\n", self.value(node)))
    }
}

/// Byte counters, split by what the bytes were for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteCounters {
    /// Upward partials, value_units x message_size each.
    pub partial_bytes: u64,
    /// Final answers handed out by the root.
    pub reply_bytes: u64,
    /// Register and cancel broadcasts.
    pub control_bytes: u64,
    pub messages: u64,
    pub link: LinkStats,
}

impl ByteCounters {
    /// Result bytes: everything sent toward or out of the root.
    pub fn total_bytes(&self) -> u64 {
        self.partial_bytes + self.reply_bytes
    }

    pub fn since(&self, earlier: &ByteCounters) -> ByteCounters {
        ByteCounters {
            partial_bytes: self.partial_bytes - earlier.partial_bytes,
            reply_bytes: self.reply_bytes - earlier.reply_bytes,
            control_bytes: self.control_bytes - earlier.control_bytes,
            messages: self.messages - earlier.messages,
            link: LinkStats {
                link_bytes: self.link.link_bytes - earlier.link.link_bytes,
                traversals: self.link.traversals - earlier.link.traversals,
            },
        }
    }
}

/// One epoch's answer at the root.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: u64,
    pub epoch: u64,
    pub issued_ns: Nanos,
    pub done_ns: Nanos,
    pub partial: PartialAggregate,
}

impl QueryOutcome {
    pub fn latency_ms(&self) -> f64 {
        (self.done_ns - self.issued_ns) as f64 / NS_PER_MS as f64
    }
}

struct InFlight {
    to: usize,
    frame: Frame,
    size: u64,
    units: u64,
    class: MessageClass,
    path: Arc<[Hop]>,
}

enum Event {
    Link { msg: Box<InFlight>, hop: usize },
    Arrive { msg: Box<InFlight> },
    Process { node: usize, frame: Frame },
    Timer { node: usize, timer: Timer },
    Sample { node: usize, tree_id: TreeId, query_id: u64, epoch: u64, query: Arc<SensorQuery> },
}

struct SimNode {
    name: String,
    router: usize,
    ising: IsingNode,
    cpu_busy: Nanos,
    rng: ChaCha8Rng,
    alive: bool,
    send_delay: Nanos,
}

/// Single-threaded discrete-event run of ISING over a transit-stub network.
/// Node 0 is the root of every query.
pub struct Sim {
    params: SimParams,
    net: Network,
    queue: EventQueue<Event>,
    nodes: Vec<SimNode>,
    index: HashMap<NodeId, usize>,
    membership: Arc<Membership>,
    backend: Box<dyn SensorBackend>,
    bytes: ByteCounters,
    issued: HashMap<u64, Nanos>,
    outcomes: Vec<QueryOutcome>,
    dropped_up: u64,
}

impl std::fmt::Debug for Sim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sim").field("nodes", &self.nodes.len()).field("now", &self.queue.now()).finish()
    }
}

/// Name of sim node `i`; also the source field of its tuples.
pub fn sim_node_name(i: usize) -> String {
    format!("sim{i}")
}

/// Identifiers are drawn afresh for every seed, as a new deployment would.
pub fn id_name(seed: u64, name: &str) -> String {
    format!("{name}#{seed}")
}

impl Sim {
    /// Places `n` nodes on the first `n` hosts of `topo`.
    pub fn new(
        topo: Arc<SimTopology>,
        n: usize,
        params: SimParams,
        seed: u64,
        backend: Box<dyn SensorBackend>,
    ) -> Result<Sim, SimError> {
        params.validate()?;
        if n == 0 {
            return Err(SimError::Config { field: "nodes".into(), reason: "must be at least 1".into() });
        }
        if n > topo.hosts.len() {
            return Err(SimError::Config {
                field: "nodes".into(),
                reason: format!("{n} nodes but only {} stub hosts", topo.hosts.len()),
            });
        }
        let mut net = Network::new(topo.clone());
        let routers: Vec<usize> = topo.hosts[..n].to_vec();
        let names: Vec<String> = (0..n).map(sim_node_name).collect();
        let ids = names
            .iter()
            .map(|name| node_id_from_name(&id_name(seed, name), params.id_digits))
            .collect::<Result<Vec<_>, _>>()?;
        let index: HashMap<NodeId, usize> = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        if index.len() != n {
            return Err(SimError::Config { field: "sim.id_digits".into(), reason: "node id collision".into() });
        }
        let mut lat = vec![0.0f64; n * n];
        for (i, &a) in routers.iter().enumerate() {
            for (j, &b) in routers.iter().enumerate() {
                lat[i * n + j] = net.routes().latency_ns(a, b) as f64 / NS_PER_MS as f64;
            }
        }
        let lookup = index.clone();
        let membership = Arc::new(Membership::new(ids.iter().cloned(), move |a: &NodeId, b: &NodeId| {
            lat[lookup[a] * n + lookup[b]]
        }));
        let mut nodes = Vec::with_capacity(n);
        for (i, id) in ids.into_iter().enumerate() {
            let mut qtree = QTree::new(id, membership.clone())?;
            qtree.set_up_loss(params.up_loss, stream_seed(seed, 2 * i as u64))?;
            nodes.push(SimNode {
                name: names[i].clone(),
                router: routers[i],
                ising: IsingNode::new(qtree, params.ising_config()),
                cpu_busy: 0,
                rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, 2 * i as u64 + 1)),
                alive: true,
                send_delay: 0,
            });
        }
        Ok(Sim {
            params,
            net,
            queue: EventQueue::new(),
            nodes,
            index,
            membership,
            backend,
            bytes: ByteCounters::default(),
            issued: HashMap::new(),
            outcomes: Vec::new(),
            dropped_up: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn now(&self) -> Nanos {
        self.queue.now()
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn node_name(&self, i: usize) -> &str {
        &self.nodes[i].name
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn node_id(&self, i: usize) -> &NodeId {
        self.nodes[i].ising.qtree().me()
    }

    pub fn counters(&self, i: usize) -> &NodeCounters {
        self.nodes[i].ising.counters()
    }

    pub fn membership(&self) -> &Arc<Membership> {
        &self.membership
    }

    pub fn root_id(&self) -> &NodeId {
        self.node_id(0)
    }

    /// The tree queries of `kind` use.
    pub fn tree(&self, kind: TopologyKind) -> Result<Arc<TreeStructure>, SimError> {
        Ok(self.membership.tree(self.root_id(), kind)?)
    }

    /// Replaces the derived tree of `tree.kind` with a fixed shape.
    pub fn pin_tree(&self, tree: TreeStructure) -> Result<(), SimError> {
        Ok(self.membership.pin_tree(tree)?)
    }

    pub fn bytes(&self) -> ByteCounters {
        ByteCounters { link: self.net.stats, ..self.bytes }
    }

    pub fn dropped_up(&self) -> u64 {
        self.dropped_up
    }

    pub fn outcomes(&self) -> &[QueryOutcome] {
        &self.outcomes
    }

    /// Reads a sensor on one node directly, bypassing the tree.
    pub fn fetch_local(&mut self, node: usize, port: u16, name: &str) -> Result<String, String> {
        let now_ms = self.now() / NS_PER_MS;
        self.backend.fetch(node, port, name, now_ms)
    }

    /// A dead node ignores every frame, timer and sample, so its whole
    /// subtree goes missing from results.
    pub fn kill(&mut self, node: usize) {
        self.nodes[node].alive = false;
    }

    /// Holds each partial a node sends by an extra `ms`.
    pub fn set_send_delay(&mut self, node: usize, ms: f64) {
        self.nodes[node].send_delay = ms_to_ns(ms);
    }

    /// Starts `query` at the root now. Returns its query id.
    pub fn issue(&mut self, query: &SensorQuery, kind: TopologyKind) -> Result<u64, SimError> {
        let now = self.now();
        let (qid, actions) = self.nodes[0].ising.start_query(now / NS_PER_MS, query, kind)?;
        self.issued.insert(qid, now);
        self.apply(0, actions);
        Ok(qid)
    }

    /// Stops a continuous query.
    pub fn cancel(&mut self, query_id: u64) -> Result<(), SimError> {
        let actions = self.nodes[0].ising.cancel_query(query_id)?;
        self.apply(0, actions);
        Ok(())
    }

    /// Runs every event due up to `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: Nanos) {
        while let Some((at, ev)) = self.queue.pop_until(t) {
            self.handle(at, ev);
        }
        self.queue.advance_to(t);
    }

    /// Runs until the root reports epoch `epoch` of `query_id`, the queue
    /// drains, or `limit` passes.
    pub fn run_until_outcome(&mut self, query_id: u64, epoch: u64, limit: Nanos) -> Option<QueryOutcome> {
        let found = |s: &Sim| s.outcomes.iter().rev().find(|o| o.query_id == query_id && o.epoch == epoch).cloned();
        loop {
            if let Some(o) = found(self) {
                return Some(o);
            }
            let (at, ev) = self.queue.pop_until(limit)?;
            self.handle(at, ev);
        }
    }

    /// Issues a snapshot query and runs until its answer is ready.
    pub fn snapshot(&mut self, query: &SensorQuery, kind: TopologyKind) -> Result<QueryOutcome, SimError> {
        let mut q = query.clone();
        q.epoch_ms = 0;
        let qid = self.issue(&q, kind)?;
        self.run_until_outcome(qid, 0, Nanos::MAX)
            .ok_or_else(|| SimError::Runtime(format!("query {qid} never completed")))
    }

    /// Runs everything left in the queue.
    pub fn drain(&mut self) {
        while let Some((at, ev)) = self.queue.pop() {
            self.handle(at, ev);
        }
    }

    fn handle(&mut self, now: Nanos, ev: Event) {
        match ev {
            Event::Link { msg, hop } => {
                let arrival = self.net.transmit(now, msg.path[hop], msg.size);
                if hop + 1 < msg.path.len() {
                    self.queue.push(arrival, Event::Link { msg, hop: hop + 1 });
                } else {
                    self.queue.push(arrival, Event::Arrive { msg });
                }
            }
            Event::Arrive { msg } => {
                let node = &mut self.nodes[msg.to];
                if !node.alive {
                    return;
                }
                let cost = match msg.class {
                    MessageClass::Partial => {
                        let mut ms = self.params.merge_cost_ms * msg.units as f64;
                        if self.params.merge_jitter > 0.0 {
                            let j = self.params.merge_jitter;
                            ms *= 1.0 + node.rng.random_range(-j..j);
                        }
                        ms_to_ns(ms)
                    }
                    _ => 0,
                };
                let done = now.max(node.cpu_busy) + cost;
                node.cpu_busy = done;
                self.queue.push(done, Event::Process { node: msg.to, frame: msg.frame });
            }
            Event::Process { node, frame } => {
                if !self.nodes[node].alive {
                    return;
                }
                match self.nodes[node].ising.on_frame(now / NS_PER_MS, frame) {
                    Ok(actions) => self.apply(node, actions),
                    Err(e) => log::warn!("{}: bad frame: {e}", self.nodes[node].name),
                }
            }
            Event::Timer { node, timer } => {
                if self.nodes[node].alive {
                    let actions = self.nodes[node].ising.on_timer(now / NS_PER_MS, timer);
                    self.apply(node, actions);
                }
            }
            Event::Sample { node, tree_id, query_id, epoch, query } => {
                if !self.nodes[node].alive {
                    return;
                }
                let now_ms = now / NS_PER_MS;
                let backend = &mut self.backend;
                let mut fetch = |port: u16, name: &str| backend.fetch(node, port, name, now_ms);
                let tuples = sample_local(&mut fetch, &query, &self.nodes[node].name, now_ms);
                let actions = self.nodes[node].ising.on_sample(now_ms, tree_id, query_id, epoch, &tuples);
                self.apply(node, actions);
            }
        }
    }

    fn apply(&mut self, node: usize, actions: Vec<Action>) {
        let now = self.now();
        for action in actions {
            match action {
                Action::Send { out, class, value_units } => {
                    let Some(&to) = self.index.get(&out.to) else {
                        log::warn!("send to unknown node {}", out.to);
                        continue;
                    };
                    let size = value_units * self.params.message_size;
                    self.bytes.messages += 1;
                    let mut depart = now;
                    match class {
                        MessageClass::Partial => {
                            self.bytes.partial_bytes += size;
                            depart += self.nodes[node].send_delay;
                        }
                        _ => self.bytes.control_bytes += size,
                    }
                    let path = self.net.path(self.nodes[node].router, self.nodes[to].router);
                    let msg = Box::new(InFlight { to, frame: out.frame, size, units: value_units, class, path });
                    if msg.path.is_empty() {
                        self.queue.push(depart, Event::Arrive { msg });
                    } else {
                        self.queue.push(depart, Event::Link { msg, hop: 0 });
                    }
                }
                Action::SetTimer { at_ms, timer } => {
                    self.queue.push(at_ms.saturating_mul(NS_PER_MS), Event::Timer { node, timer });
                }
                Action::Sample { tree_id, query_id, epoch, query } => {
                    let at = now + ms_to_ns(self.params.sample_latency_ms);
                    self.queue.push(at, Event::Sample { node, tree_id, query_id, epoch, query });
                }
                Action::Dropped { .. } => self.dropped_up += 1,
                Action::Result { query_id, epoch, partial } => {
                    let reply_units = partial.finalize("", 0).len().max(1) as u64;
                    self.bytes.reply_bytes += reply_units * self.params.message_size;
                    let issued_ns = self.issued.get(&query_id).copied().unwrap_or(now);
                    self.outcomes.push(QueryOutcome { query_id, epoch, issued_ns, done_ns: now, partial });
                }
            }
        }
    }
}
