use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::partial::{PartialAggregate, ResultTuple};
use super::query::{parse_query, SensorQuery};
use super::IsingError;
use crate::qtree::{Inbound, Outgoing, QTree, TopologyKind, TreeId, UpSend};

/// Timeout before a node gives up on slow children for an epoch:
/// `(max_depth - node_depth) * (compute_max + latency_max)`.
pub fn node_timeout(node_depth: usize, max_depth: usize, compute_max_ms: u64, latency_max_ms: u64) -> u64 {
    max_depth.saturating_sub(node_depth) as u64 * (compute_max_ms + latency_max_ms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsingConfig {
    /// Longest time any node needs to merge its children after the last arrives.
    pub compute_max_ms: u64,
    /// Longest one-way latency between adjacent overlay nodes.
    pub latency_max_ms: u64,
    /// Deepest tree the timeouts are sized for.
    pub max_depth: usize,
}

impl Default for IsingConfig {
    fn default() -> Self {
        IsingConfig {
            compute_max_ms: 100,
            latency_max_ms: 400,
            max_depth: 2 * crate::qtree::DEFAULT_DIGITS,
        }
    }
}

/// Messages exchanged between ISING instances inside QTree frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IsingMessage {
    Register { query_id: u64, url: String },
    Cancel { query_id: u64 },
    Partial { query_id: u64, epoch: u64, from: String, partial: PartialAggregate },
}

impl IsingMessage {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("ising messages always serialize")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IsingError> {
        serde_json::from_slice(bytes).map_err(|e| IsingError::Wire(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Timer {
    EpochStart { tree_id: TreeId, query_id: u64, epoch: u64 },
    Deadline { tree_id: TreeId, query_id: u64, epoch: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageClass {
    Register,
    Cancel,
    Partial,
}

/// Work the driver (simulator or network runtime) must carry out.
#[derive(Debug, Clone)]
pub enum Action {
    /// Transmit a frame. `value_units` is the number of values carried.
    Send { out: Outgoing, class: MessageClass, value_units: u64 },
    /// Call [`IsingNode::on_timer`] at `at_ms`.
    SetTimer { at_ms: u64, timer: Timer },
    /// Take a local sample and report it through [`IsingNode::on_sample`].
    Sample { tree_id: TreeId, query_id: u64, epoch: u64, query: Arc<SensorQuery> },
    /// An upward partial was dropped by loss injection.
    Dropped { query_id: u64, epoch: u64 },
    /// Root only: the aggregate for one epoch is complete (or timed out).
    Result { query_id: u64, epoch: u64, partial: PartialAggregate },
}

#[derive(Debug)]
struct EpochState {
    partial: PartialAggregate,
    local_done: bool,
    heard: HashSet<String>,
}

#[derive(Debug)]
struct Registered {
    query: Arc<SensorQuery>,
    registered_at: u64,
    level: usize,
    children: usize,
    open: BTreeMap<u64, EpochState>,
    sent: BTreeSet<u64>,
}

/// Bookkeeping counters, mostly for tests and experiment metrics.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct NodeCounters {
    pub partials_sent: u64,
    pub late_discarded: u64,
    pub deadline_flushes: u64,
}

/// Sans-IO ISING instance. All inputs arrive through `on_*` calls with the
/// current local time; all effects are returned as [`Action`]s so the same
/// logic runs under the simulator and over real sockets.
#[derive(Debug)]
pub struct IsingNode {
    qtree: QTree,
    config: IsingConfig,
    queries: HashMap<(TreeId, u64), Registered>,
    trees: HashMap<TopologyKind, TreeId>,
    next_query: u64,
    counters: NodeCounters,
}

/// How many recently sent epochs to remember for late-arrival detection.
const SENT_WINDOW: u64 = 256;

impl IsingNode {
    pub fn new(qtree: QTree, config: IsingConfig) -> Self {
        IsingNode {
            qtree,
            config,
            queries: HashMap::new(),
            trees: HashMap::new(),
            next_query: 1,
            counters: NodeCounters::default(),
        }
    }

    pub fn qtree(&self) -> &QTree {
        &self.qtree
    }

    pub fn qtree_mut(&mut self) -> &mut QTree {
        &mut self.qtree
    }

    pub fn config(&self) -> &IsingConfig {
        &self.config
    }

    pub fn counters(&self) -> &NodeCounters {
        &self.counters
    }

    pub fn active_queries(&self) -> usize {
        self.queries.len()
    }

    /// Root side: broadcast `query` over a tree of the given kind and register
    /// it locally. Returns the query id used in later [`Action::Result`]s.
    pub fn start_query(
        &mut self,
        now: u64,
        query: &SensorQuery,
        kind: TopologyKind,
    ) -> Result<(u64, Vec<Action>), IsingError> {
        let tree_id = match self.trees.get(&kind) {
            Some(t) => *t,
            None => {
                let h = self.qtree.new_tree(kind)?;
                self.trees.insert(kind, h.tree_id);
                h.tree_id
            }
        };
        let query_id = self.next_query;
        self.next_query += 1;
        let msg = IsingMessage::Register { query_id, url: query.to_url() };
        let mut actions: Vec<Action> = self
            .qtree
            .down(tree_id, &msg.encode())?
            .into_iter()
            .map(|out| Action::Send { out, class: MessageClass::Register, value_units: 1 })
            .collect();
        self.register(now, tree_id, query_id, Arc::new(query.clone()), &mut actions)?;
        Ok((query_id, actions))
    }

    /// Root side: stop a continuous query everywhere.
    pub fn cancel_query(&mut self, query_id: u64) -> Result<Vec<Action>, IsingError> {
        let Some(key) = self.queries.keys().find(|(_, q)| *q == query_id).copied() else {
            return Ok(Vec::new());
        };
        self.queries.remove(&key);
        let msg = IsingMessage::Cancel { query_id };
        Ok(self
            .qtree
            .down(key.0, &msg.encode())?
            .into_iter()
            .map(|out| Action::Send { out, class: MessageClass::Cancel, value_units: 1 })
            .collect())
    }

    fn register(
        &mut self,
        now: u64,
        tree_id: TreeId,
        query_id: u64,
        query: Arc<SensorQuery>,
        actions: &mut Vec<Action>,
    ) -> Result<(), IsingError> {
        let level = self.qtree.whats_my_level(tree_id)?;
        let children = self.qtree.count_children(tree_id)?;
        self.queries.insert(
            (tree_id, query_id),
            Registered { query, registered_at: now, level, children, open: BTreeMap::new(), sent: BTreeSet::new() },
        );
        self.begin_epoch(now, tree_id, query_id, 0, actions);
        Ok(())
    }

    fn begin_epoch(&mut self, now: u64, tree_id: TreeId, query_id: u64, epoch: u64, actions: &mut Vec<Action>) {
        let Some(reg) = self.queries.get_mut(&(tree_id, query_id)) else { return };
        if reg.sent.contains(&epoch) {
            return;
        }
        let op = reg.query.op;
        reg.open.entry(epoch).or_insert_with(|| EpochState {
            partial: PartialAggregate::empty(op),
            local_done: false,
            heard: HashSet::new(),
        });
        let start = reg.registered_at + epoch * reg.query.epoch_ms;
        let timeout = node_timeout(
            reg.level,
            self.config.max_depth,
            self.config.compute_max_ms,
            self.config.latency_max_ms,
        );
        actions.push(Action::Sample { tree_id, query_id, epoch, query: reg.query.clone() });
        actions.push(Action::SetTimer {
            at_ms: start.max(now) + timeout,
            timer: Timer::Deadline { tree_id, query_id, epoch },
        });
        if !reg.query.is_snapshot() {
            actions.push(Action::SetTimer {
                at_ms: start + reg.query.epoch_ms,
                timer: Timer::EpochStart { tree_id, query_id, epoch: epoch + 1 },
            });
        }
    }

    pub fn on_timer(&mut self, now: u64, timer: Timer) -> Vec<Action> {
        let mut actions = Vec::new();
        match timer {
            Timer::EpochStart { tree_id, query_id, epoch } => {
                self.begin_epoch(now, tree_id, query_id, epoch, &mut actions);
            }
            Timer::Deadline { tree_id, query_id, epoch } => {
                let pending = self
                    .queries
                    .get(&(tree_id, query_id))
                    .is_some_and(|r| r.open.contains_key(&epoch));
                if pending {
                    self.counters.deadline_flushes += 1;
                    self.flush(tree_id, query_id, epoch, &mut actions);
                }
            }
        }
        actions
    }

    /// Reports the local sample for an epoch; an empty list means the local
    /// value is invalid (sensor down, predicate false, nothing selected).
    pub fn on_sample(
        &mut self,
        _now: u64,
        tree_id: TreeId,
        query_id: u64,
        epoch: u64,
        tuples: &[ResultTuple],
    ) -> Vec<Action> {
        let mut actions = Vec::new();
        let Some(reg) = self.queries.get_mut(&(tree_id, query_id)) else { return actions };
        let op = reg.query.op;
        let Some(state) = reg.open.get_mut(&epoch) else { return actions };
        if !state.local_done {
            state.local_done = true;
            state
                .partial
                .merge(&PartialAggregate::from_local(op, tuples))
                .expect("same op");
        }
        self.maybe_complete(tree_id, query_id, epoch, &mut actions);
        actions
    }

    /// Handles a frame from the transport.
    pub fn on_frame(&mut self, now: u64, frame: crate::qtree::Frame) -> Result<Vec<Action>, IsingError> {
        let mut actions = Vec::new();
        match self.qtree.on_frame(frame)? {
            Inbound::Down { tree_id, payload, forward } => {
                let msg = IsingMessage::decode(&payload)?;
                let class = match msg {
                    IsingMessage::Register { .. } => MessageClass::Register,
                    _ => MessageClass::Cancel,
                };
                actions.extend(forward.into_iter().map(|out| Action::Send { out, class, value_units: 1 }));
                match msg {
                    IsingMessage::Register { query_id, url } => {
                        let query = Arc::new(parse_query(&url)?);
                        self.register(now, tree_id, query_id, query, &mut actions)?;
                    }
                    IsingMessage::Cancel { query_id } => {
                        self.queries.remove(&(tree_id, query_id));
                    }
                    IsingMessage::Partial { .. } => {
                        return Err(IsingError::Wire("partial travelling down the tree".into()))
                    }
                }
            }
            Inbound::Up { tree_id, payload } => {
                let IsingMessage::Partial { query_id, epoch, from, partial } = IsingMessage::decode(&payload)? else {
                    return Err(IsingError::Wire("only partials travel up the tree".into()));
                };
                self.on_child_partial(tree_id, query_id, epoch, from, partial, &mut actions)?;
            }
        }
        Ok(actions)
    }

    fn on_child_partial(
        &mut self,
        tree_id: TreeId,
        query_id: u64,
        epoch: u64,
        from: String,
        partial: PartialAggregate,
        actions: &mut Vec<Action>,
    ) -> Result<(), IsingError> {
        let Some(reg) = self.queries.get_mut(&(tree_id, query_id)) else {
            self.counters.late_discarded += 1;
            return Ok(());
        };
        let stale = reg.sent.contains(&epoch)
            || reg.sent.first().is_some_and(|lo| epoch < *lo && reg.sent.len() as u64 >= SENT_WINDOW);
        if stale {
            self.counters.late_discarded += 1;
            return Ok(());
        }
        let op = reg.query.op;
        let state = reg.open.entry(epoch).or_insert_with(|| EpochState {
            partial: PartialAggregate::empty(op),
            local_done: false,
            heard: HashSet::new(),
        });
        if state.heard.insert(from) {
            state.partial.merge(&partial)?;
        }
        self.maybe_complete(tree_id, query_id, epoch, actions);
        Ok(())
    }

    fn maybe_complete(&mut self, tree_id: TreeId, query_id: u64, epoch: u64, actions: &mut Vec<Action>) {
        let ready = self.queries.get(&(tree_id, query_id)).is_some_and(|r| {
            r.open.get(&epoch).is_some_and(|s| s.local_done && s.heard.len() >= r.children)
        });
        if ready {
            self.flush(tree_id, query_id, epoch, actions);
        }
    }

    /// Sends whatever has been gathered for `epoch` and closes it.
    fn flush(&mut self, tree_id: TreeId, query_id: u64, epoch: u64, actions: &mut Vec<Action>) {
        let key = (tree_id, query_id);
        let Some(reg) = self.queries.get_mut(&key) else { return };
        let Some(state) = reg.open.remove(&epoch) else { return };
        reg.sent.insert(epoch);
        while reg.sent.len() as u64 > SENT_WINDOW {
            reg.sent.pop_first();
        }
        let snapshot = reg.query.is_snapshot();
        if snapshot {
            self.queries.remove(&key);
        }
        let partial = state.partial;
        let value_units = partial.value_units();
        let msg = IsingMessage::Partial { query_id, epoch, from: self.qtree.me().to_string(), partial };
        self.counters.partials_sent += 1;
        match self.qtree.up(tree_id, &msg.encode()) {
            Ok(UpSend::Send(out)) => actions.push(Action::Send { out, class: MessageClass::Partial, value_units }),
            Ok(UpSend::Local(_)) => {
                let IsingMessage::Partial { partial, .. } = msg else { unreachable!() };
                actions.push(Action::Result { query_id, epoch, partial });
            }
            Ok(UpSend::Dropped) => actions.push(Action::Dropped { query_id, epoch }),
            Err(e) => log::warn!("cannot send partial up: {e}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::partial::AggregateOp;
    use crate::ising::query::HostScope;
    use crate::qtree::{node_id_from_name, Membership, NodeId};

    #[test]
    fn timeout_formula() {
        assert_eq!(node_timeout(3, 8, 100, 150), 1250);
        assert_eq!(node_timeout(8, 8, 100, 150), 0);
        assert_eq!(node_timeout(0, 8, 100, 150), 8 * 250);
        assert_eq!(node_timeout(9, 8, 100, 150), 0);
    }

    #[test]
    fn parent_deadline_leaves_room_for_child_plus_one_hop() {
        let c = IsingConfig::default();
        for d in 0..c.max_depth {
            let parent = node_timeout(d, c.max_depth, c.compute_max_ms, c.latency_max_ms);
            let child = node_timeout(d + 1, c.max_depth, c.compute_max_ms, c.latency_max_ms);
            assert!(parent > child + c.latency_max_ms);
        }
    }

    fn pair() -> (IsingNode, IsingNode, NodeId) {
        let a = node_id_from_name("a", 16).unwrap();
        let b = node_id_from_name("b", 16).unwrap();
        let m = Arc::new(Membership::new([a.clone(), b.clone()], |_, _| 1.0));
        let root = IsingNode::new(QTree::new(a.clone(), m.clone()).unwrap(), IsingConfig::default());
        let leaf = IsingNode::new(QTree::new(b.clone(), m).unwrap(), IsingConfig::default());
        (root, leaf, a)
    }

    fn sends(actions: &[Action]) -> Vec<crate::qtree::Frame> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send { out, .. } => Some(out.frame.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn snapshot_round_trip_between_two_nodes() {
        let (mut root, mut leaf, _) = pair();
        let q = SensorQuery::new(9000, "load", HostScope::All, AggregateOp::Sum, 0);
        let (qid, acts) = root.start_query(0, &q, TopologyKind::Direct).unwrap();
        let down = sends(&acts);
        assert_eq!(down.len(), 1);
        let tree_id = down[0].tree_id;
        assert!(root.on_sample(0, tree_id, qid, 0, &[ResultTuple::new("a:9000", 0, "2")]).is_empty());
        let acts = leaf.on_frame(5, down[0].clone()).unwrap();
        assert!(acts.iter().any(|a| matches!(a, Action::Sample { epoch: 0, .. })));
        let up = leaf.on_sample(6, tree_id, qid, 0, &[ResultTuple::new("b:9000", 6, "3")]);
        let up = sends(&up);
        assert_eq!(up.len(), 1);
        assert_eq!(leaf.active_queries(), 0);
        let res = root.on_frame(9, up[0].clone()).unwrap();
        let Some(Action::Result { partial, .. }) = res.last() else { panic!("{res:?}") };
        assert_eq!(partial.contributing, 2);
        assert_eq!(partial.scalar(), Some(5.0));
        assert_eq!(root.active_queries(), 0);
    }

    #[test]
    fn deadline_flushes_partial_and_late_child_is_discarded() {
        let (mut root, mut leaf, _) = pair();
        let q = SensorQuery::new(9000, "load", HostScope::All, AggregateOp::Count, 1000);
        let (qid, acts) = root.start_query(0, &q, TopologyKind::Direct).unwrap();
        let tree_id = sends(&acts)[0].tree_id;
        let deadline = acts
            .iter()
            .find_map(|a| match a {
                Action::SetTimer { at_ms, timer: t @ Timer::Deadline { .. } } => Some((*at_ms, *t)),
                _ => None,
            })
            .unwrap();
        root.on_sample(0, tree_id, qid, 0, &[ResultTuple::new("a:9000", 0, "1")]);
        let res = root.on_timer(deadline.0, deadline.1);
        let Some(Action::Result { partial, .. }) = res.last() else { panic!() };
        assert_eq!(partial.contributing, 1);
        // the leaf's epoch-0 partial shows up after the flush
        leaf.on_frame(1, sends(&acts)[0].clone()).unwrap();
        let up = sends(&leaf.on_sample(1, tree_id, qid, 0, &[ResultTuple::new("b:9000", 1, "1")]));
        let res = root.on_frame(deadline.0 + 1, up[0].clone()).unwrap();
        assert!(res.is_empty());
        assert_eq!(root.counters().late_discarded, 1);
    }

    #[test]
    fn message_codec_round_trip() {
        let m = IsingMessage::Partial {
            query_id: 4,
            epoch: 9,
            from: "0123".into(),
            partial: PartialAggregate::from_local(AggregateOp::Avg, &[ResultTuple::new("h:1", 2, "3.5")]),
        };
        assert_eq!(IsingMessage::decode(&m.encode()).unwrap(), m);
        assert!(IsingMessage::decode(b"{").is_err());
    }
}
