use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io::Read;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::config::ClusterConfig;
use super::transport::{FrameListener, Peers};
use super::RealError;
use crate::clock::wall_clock;
use crate::ising::{
    fanin_local, node_timeout, parse_query, root_respond, sample_local, Action, HostScope, IsingNode,
    PartialAggregate, ResultTuple, SensorQuery, Timer,
};
use crate::qtree::{Frame, QTree, TopologyKind, TreeId};
use crate::sensact::{
    http_get, serve_http, ChildProcesses, Counters, Handler, HostnameSensor, KillActuator, Ledger, LoadSensor,
    RebootActuator, Reply, SensorRequest, SensorServer, SharedProcesses, StartActuator,
    VirtualProcesses,
};

type EpochResult = (u64, PartialAggregate);

enum Event {
    Frame(Frame),
    Sampled { tree_id: TreeId, query_id: u64, epoch: u64, tuples: Vec<ResultTuple> },
    Start { query: Box<SensorQuery>, kind: TopologyKind, reply: Sender<Result<(u64, Receiver<EpochResult>), String>> },
    Cancel(u64),
    Stop,
}

/// Everything the event loop needs to run sensor fetches.
#[derive(Clone)]
struct Sampler {
    host: String,
    timeout: Duration,
}

impl Sampler {
    fn fetch(&self, port: u16, name: &str) -> Result<String, String> {
        http_get(&format!("http://{}:{port}/{name}", self.host), self.timeout).map_err(|e| e.to_string())
    }
}

struct Loop {
    ising: IsingNode,
    peers: Peers,
    rx: Receiver<Event>,
    tx: Sender<Event>,
    timers: BinaryHeap<Reverse<(u64, u64, Timer)>>,
    timer_seq: u64,
    subscribers: HashMap<u64, Sender<EpochResult>>,
    sampler: Sampler,
    started: Instant,
}

impl Loop {
    fn now(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn run(mut self) {
        loop {
            let wait = self.timers.peek().map(|Reverse((at, _, _))| at.saturating_sub(self.now()));
            let ev = match wait {
                Some(ms) => match self.rx.recv_timeout(Duration::from_millis(ms)) {
                    Ok(ev) => Some(ev),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => return,
                },
                None => match self.rx.recv() {
                    Ok(ev) => Some(ev),
                    Err(_) => return,
                },
            };
            if let Some(ev) = ev {
                if !self.handle(ev) {
                    return;
                }
            }
            let now = self.now();
            while self.timers.peek().is_some_and(|Reverse((at, _, _))| *at <= now) {
                let Reverse((_, _, timer)) = self.timers.pop().unwrap();
                let actions = self.ising.on_timer(now, timer);
                self.apply(actions);
            }
        }
    }

    fn handle(&mut self, ev: Event) -> bool {
        let now = self.now();
        match ev {
            Event::Frame(frame) => match self.ising.on_frame(now, frame) {
                Ok(actions) => self.apply(actions),
                Err(e) => log::warn!("dropping frame: {e}"),
            },
            Event::Sampled { tree_id, query_id, epoch, tuples } => {
                let actions = self.ising.on_sample(now, tree_id, query_id, epoch, &tuples);
                self.apply(actions);
            }
            Event::Start { query, kind, reply } => match self.ising.start_query(now, &query, kind) {
                Ok((qid, actions)) => {
                    let (tx, rx) = mpsc::channel();
                    self.subscribers.insert(qid, tx);
                    let _ = reply.send(Ok((qid, rx)));
                    self.apply(actions);
                }
                Err(e) => {
                    let _ = reply.send(Err(e.to_string()));
                }
            },
            Event::Cancel(qid) => {
                self.subscribers.remove(&qid);
                match self.ising.cancel_query(qid) {
                    Ok(actions) => self.apply(actions),
                    Err(e) => log::warn!("cancel {qid}: {e}"),
                }
            }
            Event::Stop => return false,
        }
        true
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { out, .. } => self.peers.send(&out.to, out.frame),
                Action::SetTimer { at_ms, timer } => {
                    self.timer_seq += 1;
                    self.timers.push(Reverse((at_ms, self.timer_seq, timer)));
                }
                Action::Sample { tree_id, query_id, epoch, query } => {
                    let sampler = self.sampler.clone();
                    let tx = self.tx.clone();
                    let now_ms = crate::clock::wall_clock_ms();
                    std::thread::spawn(move || {
                        let source = format!("{}:{}", sampler.host, query.sensor_port);
                        let mut fetch = |port: u16, name: &str| sampler.fetch(port, name);
                        let tuples = sample_local(&mut fetch, &query, &source, now_ms);
                        let _ = tx.send(Event::Sampled { tree_id, query_id, epoch, tuples });
                    });
                }
                Action::Dropped { .. } => {}
                Action::Result { query_id, epoch, partial } => {
                    let gone = match self.subscribers.get(&query_id) {
                        Some(tx) => tx.send((epoch, partial)).is_err(),
                        None => false,
                    };
                    if gone {
                        self.subscribers.remove(&query_id);
                    }
                }
            }
        }
    }
}

/// The `/ising` endpoint of a node: any node can act as the root.
struct IsingHandler {
    tx: Mutex<Sender<Event>>,
    source: String,
    kind: TopologyKind,
    sampler: Sampler,
    cluster: Arc<ClusterConfig>,
    /// How long a snapshot may take before the root gives up.
    snapshot_wait: Duration,
}

impl IsingHandler {
    fn direct(&self, query: &SensorQuery, host: &str) -> Reply {
        let host = match self.cluster.find(host) {
            Some(i) => self.cluster.nodes[i].host.to_string(),
            None => host.to_owned(),
        };
        let sampler = Sampler { host: host.clone(), timeout: self.sampler.timeout };
        let mut fetch = |port: u16, name: &str| sampler.fetch(port, name);
        let now = crate::clock::wall_clock_ms();
        let tuples = sample_local(&mut fetch, query, &format!("{host}:{}", query.sensor_port), now);
        Reply::Rows(fanin_local(query.op, &tuples, &self.source, now))
    }
}

impl Handler for IsingHandler {
    fn handle(&self, req: &SensorRequest) -> Reply {
        let query = match parse_query(&req.raw) {
            Ok(q) => q,
            Err(e) => return Reply::BadRequest(e.to_string()),
        };
        if let HostScope::Host(h) = &query.host {
            return self.direct(&query, h);
        }
        let snapshot = query.is_snapshot();
        let (reply, rx) = mpsc::channel();
        let tx = self.tx.lock().unwrap().clone();
        if tx.send(Event::Start { query: Box::new(query), kind: self.kind, reply }).is_err() {
            return Reply::Failed("node is shutting down".into());
        }
        let (qid, results) = match rx.recv() {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => return Reply::Failed(e),
            Err(_) => return Reply::Failed("node is shutting down".into()),
        };
        if snapshot {
            return match results.recv_timeout(self.snapshot_wait) {
                Ok((_, partial)) => Reply::Rows(root_respond(&partial, &self.source, crate::clock::wall_clock_ms())),
                Err(_) => Reply::Failed("no result before the root deadline".into()),
            };
        }
        Reply::Stream(Box::new(EpochStream { results, tx, qid, source: self.source.clone(), buf: Vec::new(), pos: 0 }))
    }
}

/// Body of a continuous query: one CSV block per epoch, blank-line
/// separated. Dropping it (client gone) cancels the query.
struct EpochStream {
    results: Receiver<EpochResult>,
    tx: Sender<Event>,
    qid: u64,
    source: String,
    buf: Vec<u8>,
    pos: usize,
}

impl Read for EpochStream {
    fn read(&mut self, out: &mut [u8]) -> std::io::Result<usize> {
        if self.pos == self.buf.len() {
            let Ok((_, partial)) = self.results.recv() else { return Ok(0) };
            let mut block = root_respond(&partial, &self.source, crate::clock::wall_clock_ms());
            block.push('\n');
            self.buf = block.into_bytes();
            self.pos = 0;
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Drop for EpochStream {
    fn drop(&mut self) {
        let _ = self.tx.send(Event::Cancel(self.qid));
    }
}

/// A running ISING node: overlay listener, event loop and `/ising` HTTP
/// endpoint. Dropping it shuts everything down.
pub struct RealNode {
    pub index: usize,
    tx: Sender<Event>,
    listener: Option<FrameListener>,
    http: Option<crate::sensact::HttpServerHandle>,
    worker: Option<JoinHandle<()>>,
}

impl RealNode {
    pub fn start(cluster: Arc<ClusterConfig>, index: usize) -> Result<RealNode, RealError> {
        if index >= cluster.nodes.len() {
            return Err(RealError::Config { field: "node".into(), reason: format!("no node #{index}") });
        }
        let membership = cluster.membership();
        let me = cluster.node_id(index);
        let qtree = QTree::new(me, membership).map_err(|e| RealError::Runtime(e.to_string()))?;
        let ising = IsingNode::new(qtree, cluster.ising.clone());
        let addrs = (0..cluster.nodes.len()).map(|i| (cluster.node_id(i), cluster.overlay_addr(i))).collect();
        let (tx, rx) = mpsc::channel();
        let deliver = Mutex::new(tx.clone());
        let listener = FrameListener::bind(cluster.overlay_addr(index), move |f| {
            let _ = deliver.lock().unwrap().send(Event::Frame(f));
        })?;
        let host = cluster.nodes[index].host.to_string();
        let sampler = Sampler { host: host.clone(), timeout: Duration::from_millis(cluster.fetch_timeout_ms) };
        let lp = Loop {
            ising,
            peers: Peers::new(addrs),
            rx,
            tx: tx.clone(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            subscribers: HashMap::new(),
            sampler: sampler.clone(),
            started: Instant::now(),
        };
        let worker = std::thread::Builder::new().name(format!("ising-{host}")).spawn(move || lp.run())?;
        let c = &cluster.ising;
        let root_deadline = node_timeout(0, c.max_depth, c.compute_max_ms, c.latency_max_ms);
        let handler = IsingHandler {
            tx: Mutex::new(tx.clone()),
            source: cluster.ising_addr(index).to_string(),
            kind: cluster.tree,
            sampler,
            cluster: cluster.clone(),
            snapshot_wait: Duration::from_millis(root_deadline + cluster.fetch_timeout_ms + 1000),
        };
        let mut server = SensorServer::new();
        server.register("ising", Arc::new(handler)).map_err(|e| RealError::Runtime(e.to_string()))?;
        let http = serve_http(Arc::new(server), &cluster.ising_addr(index).to_string(), 8)?;
        Ok(RealNode { index, tx, listener: Some(listener), http: Some(http), worker: Some(worker) })
    }

    pub fn ising_addr(&self) -> SocketAddr {
        self.http.as_ref().expect("running").addr()
    }
}

impl Drop for RealNode {
    fn drop(&mut self) {
        // stopping the loop first ends open result streams, which frees the
        // HTTP workers serving them
        let _ = self.tx.send(Event::Stop);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
        self.http.take();
        self.listener.take();
    }
}

/// Sensor and actuator plumbing for a node started by `acme serve`.
#[derive(Debug, Clone, Default)]
pub struct SensorOptions {
    /// Directory for the per-node actuator ledger (`ledger-<name>.csv`).
    pub ledger_dir: Option<std::path::PathBuf>,
}

/// The sensor servers of one node and what they share.
pub struct StartedSensors {
    pub server: Arc<SensorServer>,
    pub counters: Counters,
    pub ledger: Arc<Ledger>,
    pub processes: SharedProcesses,
    pub handles: Vec<crate::sensact::HttpServerHandle>,
}

/// Builds the standard sensor server of node `index` (`hostname`, `load`,
/// `counter`, `start`, `kill`, `reboot`) and serves it on every sensor port
/// of the node's host.
pub fn node_sensors(cluster: &ClusterConfig, index: usize, opts: &SensorOptions) -> Result<StartedSensors, RealError> {
    let node = &cluster.nodes[index];
    let ledger = Arc::new(match &opts.ledger_dir {
        Some(dir) => Ledger::with_file(wall_clock(), &dir.join(format!("ledger-{}.csv", node.name)))?,
        None => Ledger::in_memory(wall_clock()),
    });
    let processes: SharedProcesses = if cluster.app_command.is_empty() {
        Arc::new(Mutex::new(VirtualProcesses::new()))
    } else {
        Arc::new(Mutex::new(ChildProcesses::new(cluster.app_command.clone()).map_err(|e| RealError::Config {
            field: "app_command".into(),
            reason: e,
        })?))
    };
    for _ in 0..cluster.instances_per_node {
        processes.lock().unwrap().start().map_err(RealError::Runtime)?;
    }
    let counters = Counters::new();
    let load = match &node.load_file {
        Some(p) => LoadSensor::from_file(p),
        None => LoadSensor::system(),
    };
    let mut s = SensorServer::new();
    let reg = |s: &mut SensorServer, name: &str, h: Arc<dyn Handler>| {
        s.register(name, h).map_err(|e| RealError::Runtime(e.to_string()))
    };
    reg(&mut s, "hostname", Arc::new(HostnameSensor::new(node.name.clone())))?;
    reg(&mut s, "load", Arc::new(load))?;
    reg(&mut s, "counter", Arc::new(counters.clone()))?;
    reg(&mut s, "start", Arc::new(StartActuator { processes: processes.clone(), ledger: ledger.clone() }))?;
    reg(&mut s, "kill", Arc::new(KillActuator { processes: processes.clone(), ledger: ledger.clone() }))?;
    reg(&mut s, "reboot", Arc::new(RebootActuator { processes: processes.clone(), ledger: ledger.clone() }))?;
    let server = Arc::new(s);
    let handles = cluster
        .sensor_ports
        .iter()
        .map(|p| serve_http(server.clone(), &format!("{}:{p}", node.host), 4))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StartedSensors { server, counters, ledger, processes, handles })
}

/// Reads a ledger file written by [`node_sensors`].
pub fn read_ledger(path: &Path) -> Result<Vec<crate::sensact::LedgerRow>, RealError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RealError::Runtime(e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| RealError::Runtime(e.to_string()))
}
