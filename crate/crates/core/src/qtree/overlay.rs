use std::collections::{BTreeSet, HashMap};
use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::id::NodeId;
use super::tree::{build_tree, TopologyKind, TreeStructure};
use super::QTreeError;

pub type TreeId = u64;

/// Handle returned by [`QTree::new_tree`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreeHandle {
    pub tree_id: TreeId,
    pub root: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Direction {
    Down = 0,
    Up = 1,
}

/// One QTree message: `tree_id (8, BE) | direction (1) | length (4, BE) | payload`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tree_id: TreeId,
    pub direction: Direction,
    pub payload: Vec<u8>,
}

pub const FRAME_HEADER_LEN: usize = 13;

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.tree_id.to_be_bytes());
        out.push(self.direction as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Frame, QTreeError> {
        if buf.len() < FRAME_HEADER_LEN {
            return Err(QTreeError::Wire(format!("short frame: {} bytes", buf.len())));
        }
        let tree_id = u64::from_be_bytes(buf[0..8].try_into().unwrap());
        let direction = match buf[8] {
            0 => Direction::Down,
            1 => Direction::Up,
            d => return Err(QTreeError::Wire(format!("bad direction byte {d}"))),
        };
        let len = u32::from_be_bytes(buf[9..13].try_into().unwrap()) as usize;
        if buf.len() != FRAME_HEADER_LEN + len {
            return Err(QTreeError::Wire(format!(
                "length field says {len}, frame carries {}",
                buf.len() - FRAME_HEADER_LEN
            )));
        }
        Ok(Frame { tree_id, direction, payload: buf[FRAME_HEADER_LEN..].to_vec() })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    /// Reads one frame from a stream. Returns `Ok(None)` on a clean EOF.
    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Option<Frame>> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        match r.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let len = u32::from_be_bytes(header[9..13].try_into().unwrap()) as usize;
        let mut buf = header.to_vec();
        buf.resize(FRAME_HEADER_LEN + len, 0);
        r.read_exact(&mut buf[FRAME_HEADER_LEN..])?;
        Frame::decode(&buf).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

pub type LatencyFn = dyn Fn(&NodeId, &NodeId) -> f64 + Send + Sync;

/// Static membership shared by every node of a deployment. Trees are pure
/// functions of (membership, root, kind), so each node can derive the same
/// tree locally; the cache lets co-located nodes share one copy.
pub struct Membership {
    members: Vec<NodeId>,
    index: HashMap<NodeId, u32>,
    latency: Box<LatencyFn>,
    cache: Mutex<HashMap<(u32, TopologyKind), Arc<TreeStructure>>>,
}

impl std::fmt::Debug for Membership {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Membership").field("members", &self.members.len()).finish()
    }
}

impl Membership {
    pub fn new<F>(members: impl IntoIterator<Item = NodeId>, latency: F) -> Self
    where
        F: Fn(&NodeId, &NodeId) -> f64 + Send + Sync + 'static,
    {
        let set: BTreeSet<NodeId> = members.into_iter().collect();
        let members: Vec<NodeId> = set.into_iter().collect();
        let index = members.iter().enumerate().map(|(i, m)| (m.clone(), i as u32)).collect();
        Membership { members, index, latency: Box::new(latency), cache: Mutex::new(HashMap::new()) }
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn contains(&self, n: &NodeId) -> bool {
        self.index.contains_key(n)
    }

    pub fn latency(&self, a: &NodeId, b: &NodeId) -> f64 {
        (self.latency)(a, b)
    }

    pub fn tree(&self, root: &NodeId, kind: TopologyKind) -> Result<Arc<TreeStructure>, QTreeError> {
        let idx = *self
            .index
            .get(root)
            .ok_or_else(|| QTreeError::InvalidArgument(format!("root {root} is not a member")))?;
        let mut cache = self.cache.lock().unwrap();
        if let Some(t) = cache.get(&(idx, kind)) {
            return Ok(t.clone());
        }
        let set: BTreeSet<NodeId> = self.members.iter().cloned().collect();
        let tree = Arc::new(build_tree(&set, root, kind, |a, b| self.latency(a, b))?);
        cache.insert((idx, kind), tree.clone());
        Ok(tree)
    }

    /// Overrides the derived tree for `(tree.root, tree.kind)` with a fixed
    /// shape. Every member must appear in it. Used to build specific
    /// topologies (chains, stars) for fault experiments.
    pub fn pin_tree(&self, tree: TreeStructure) -> Result<(), QTreeError> {
        if tree.len() != self.members.len() || !self.members.iter().all(|m| tree.contains(m)) {
            return Err(QTreeError::InvalidArgument("pinned tree must span the membership".into()));
        }
        let idx = *self
            .index
            .get(&tree.root)
            .ok_or_else(|| QTreeError::InvalidArgument("pinned root is not a member".into()))?;
        self.cache.lock().unwrap().insert((idx, tree.kind), Arc::new(tree));
        Ok(())
    }

    fn encode_tree_id(&self, seq: u32, root: &NodeId, kind: TopologyKind) -> TreeId {
        let idx = self.index[root] as u64;
        let kind_bit = match kind {
            TopologyKind::Direct => 0,
            TopologyKind::Prefix => 1u64 << 31,
        };
        ((seq as u64) << 32) | kind_bit | idx
    }

    fn decode_tree_id(&self, id: TreeId) -> Result<(NodeId, TopologyKind), QTreeError> {
        let idx = (id & 0x7fff_ffff) as usize;
        let kind = if id & (1 << 31) != 0 { TopologyKind::Prefix } else { TopologyKind::Direct };
        let root = self
            .members
            .get(idx)
            .ok_or(QTreeError::UnknownTree(id))?
            .clone();
        Ok((root, kind))
    }
}

/// A frame addressed to another node.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: NodeId,
    pub frame: Frame,
}

/// Result of [`QTree::up`].
#[derive(Debug, Clone, PartialEq)]
pub enum UpSend {
    /// Send toward the parent.
    Send(Outgoing),
    /// The caller is the root: hand the message to the local consumer.
    Local(Vec<u8>),
    /// Dropped by loss injection.
    Dropped,
}

/// What a received frame means to the local node.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    /// A broadcast from above. `forward` holds the copies for our children,
    /// already addressed; the transport must send them.
    Down { tree_id: TreeId, payload: Vec<u8>, forward: Vec<Outgoing> },
    /// A message from one of our children.
    Up { tree_id: TreeId, payload: Vec<u8> },
}

/// Per-node QTree state: the five-call interface plus frame handling.
#[derive(Debug)]
pub struct QTree {
    me: NodeId,
    membership: Arc<Membership>,
    trees: HashMap<TreeId, Arc<TreeStructure>>,
    next_seq: u32,
    loss: Option<(f64, ChaCha8Rng)>,
    dropped: u64,
}

impl QTree {
    pub fn new(me: NodeId, membership: Arc<Membership>) -> Result<Self, QTreeError> {
        if !membership.contains(&me) {
            return Err(QTreeError::InvalidArgument(format!("{me} is not a member")));
        }
        Ok(QTree { me, membership, trees: HashMap::new(), next_seq: 1, loss: None, dropped: 0 })
    }

    pub fn me(&self) -> &NodeId {
        &self.me
    }

    pub fn membership(&self) -> &Arc<Membership> {
        &self.membership
    }

    /// Drops each upward send with probability `p`, using a node-private
    /// RNG stream.
    pub fn set_up_loss(&mut self, p: f64, seed: u64) -> Result<(), QTreeError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(QTreeError::InvalidArgument(format!("loss probability {p} not in [0, 1]")));
        }
        self.loss = if p > 0.0 { Some((p, ChaCha8Rng::seed_from_u64(seed))) } else { None };
        Ok(())
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Forms a tree rooted at this node over the current membership.
    pub fn new_tree(&mut self, kind: TopologyKind) -> Result<TreeHandle, QTreeError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let tree_id = self.membership.encode_tree_id(seq, &self.me, kind);
        let tree = self.membership.tree(&self.me, kind)?;
        self.trees.insert(tree_id, tree);
        Ok(TreeHandle { tree_id, root: self.me.clone() })
    }

    /// Looks up (or lazily derives) the tree named by `tree_id`.
    pub fn tree(&mut self, tree_id: TreeId) -> Result<Arc<TreeStructure>, QTreeError> {
        if let Some(t) = self.trees.get(&tree_id) {
            return Ok(t.clone());
        }
        let (root, kind) = self.membership.decode_tree_id(tree_id)?;
        let tree = self.membership.tree(&root, kind)?;
        if !tree.contains(&self.me) {
            return Err(QTreeError::UnknownTree(tree_id));
        }
        self.trees.insert(tree_id, tree.clone());
        Ok(tree)
    }

    fn known_tree(&self, tree_id: TreeId) -> Result<&Arc<TreeStructure>, QTreeError> {
        self.trees.get(&tree_id).ok_or(QTreeError::UnknownTree(tree_id))
    }

    /// Sends `payload` toward every descendant; returns the frames for our
    /// direct children, who forward further on receipt.
    pub fn down(&mut self, tree_id: TreeId, payload: &[u8]) -> Result<Vec<Outgoing>, QTreeError> {
        let tree = self.known_tree(tree_id)?;
        Ok(tree
            .children_of(&self.me)
            .map(|c| Outgoing {
                to: c.clone(),
                frame: Frame { tree_id, direction: Direction::Down, payload: payload.to_vec() },
            })
            .collect())
    }

    pub fn up(&mut self, tree_id: TreeId, payload: &[u8]) -> Result<UpSend, QTreeError> {
        let parent = self.known_tree(tree_id)?.parent_of(&self.me).cloned();
        let Some(parent) = parent else {
            return Ok(UpSend::Local(payload.to_vec()));
        };
        if let Some((p, rng)) = self.loss.as_mut() {
            if rng.random::<f64>() < *p {
                self.dropped += 1;
                return Ok(UpSend::Dropped);
            }
        }
        Ok(UpSend::Send(Outgoing {
            to: parent,
            frame: Frame { tree_id, direction: Direction::Up, payload: payload.to_vec() },
        }))
    }

    pub fn count_children(&self, tree_id: TreeId) -> Result<usize, QTreeError> {
        Ok(self.known_tree(tree_id)?.child_count(&self.me))
    }

    pub fn whats_my_level(&self, tree_id: TreeId) -> Result<usize, QTreeError> {
        self.known_tree(tree_id)?
            .depth_of(&self.me)
            .ok_or(QTreeError::UnknownTree(tree_id))
    }

    pub fn parent(&self, tree_id: TreeId) -> Result<Option<NodeId>, QTreeError> {
        Ok(self.known_tree(tree_id)?.parent_of(&self.me).cloned())
    }

    /// Interprets a frame received from the transport.
    pub fn on_frame(&mut self, frame: Frame) -> Result<Inbound, QTreeError> {
        let tree_id = frame.tree_id;
        self.tree(tree_id)?;
        match frame.direction {
            Direction::Down => {
                let forward = self.down(tree_id, &frame.payload)?;
                Ok(Inbound::Down { tree_id, payload: frame.payload, forward })
            }
            Direction::Up => Ok(Inbound::Up { tree_id, payload: frame.payload }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtree::id::{node_id_from_name, DEFAULT_DIGITS};
    use std::collections::VecDeque;

    fn membership(n: usize) -> Arc<Membership> {
        let ids = (0..n).map(|i| node_id_from_name(&format!("m{i}"), DEFAULT_DIGITS).unwrap());
        Arc::new(Membership::new(ids, |_, _| 1.0))
    }

    fn nodes(m: &Arc<Membership>) -> HashMap<NodeId, QTree> {
        m.members().iter().map(|id| (id.clone(), QTree::new(id.clone(), m.clone()).unwrap())).collect()
    }

    /// Delivers a broadcast hop by hop and returns how often each node saw it.
    fn flood(nodes: &mut HashMap<NodeId, QTree>, from: &NodeId, tree: TreeId) -> HashMap<NodeId, usize> {
        let mut seen = HashMap::new();
        let mut queue: VecDeque<Outgoing> = nodes.get_mut(from).unwrap().down(tree, b"q").unwrap().into();
        while let Some(out) = queue.pop_front() {
            *seen.entry(out.to.clone()).or_insert(0) += 1;
            match nodes.get_mut(&out.to).unwrap().on_frame(out.frame).unwrap() {
                Inbound::Down { forward, payload, .. } => {
                    assert_eq!(payload, b"q");
                    queue.extend(forward);
                }
                Inbound::Up { .. } => panic!("unexpected up"),
            }
        }
        seen
    }

    #[test]
    fn frame_round_trip_and_rejects_garbage() {
        let f = Frame { tree_id: 0xdead_beef_0102, direction: Direction::Up, payload: b"hello".to_vec() };
        let bytes = f.encode();
        assert_eq!(bytes.len(), FRAME_HEADER_LEN + 5);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        let mut cursor = io::Cursor::new(bytes.clone());
        assert_eq!(Frame::read_from(&mut cursor).unwrap().unwrap(), f);
        assert_eq!(Frame::read_from(&mut cursor).unwrap(), None);
        assert!(Frame::decode(&bytes[..10]).is_err());
        let mut bad = bytes;
        bad[8] = 7;
        assert!(Frame::decode(&bad).is_err());
    }

    #[test]
    fn handles_are_distinct_and_rooted_at_caller() {
        let m = membership(16);
        let me = m.members()[5].clone();
        let mut q = QTree::new(me.clone(), m.clone()).unwrap();
        let a = q.new_tree(TopologyKind::Prefix).unwrap();
        let b = q.new_tree(TopologyKind::Prefix).unwrap();
        assert_ne!(a.tree_id, b.tree_id);
        assert_eq!(a.root, me);
        assert_eq!(q.whats_my_level(a.tree_id).unwrap(), 0);
        let tree = q.tree(a.tree_id).unwrap();
        assert_eq!(tree.len(), 16);
    }

    #[test]
    fn root_broadcast_reaches_everyone_once() {
        let m = membership(64);
        let mut ns = nodes(&m);
        let root = m.members()[0].clone();
        let h = ns.get_mut(&root).unwrap().new_tree(TopologyKind::Prefix).unwrap();
        let seen = flood(&mut ns, &root, h.tree_id);
        assert_eq!(seen.len(), 63);
        assert!(seen.values().all(|c| *c == 1));
        let children: usize = ns.values_mut().map(|q| q.count_children(h.tree_id).unwrap()).sum();
        assert_eq!(children, 63);
    }

    #[test]
    fn interior_broadcast_covers_its_subtree() {
        let m = membership(128);
        let mut ns = nodes(&m);
        // With uniform latency every node would pick the smallest id; make
        // sure that is not the root so the tree has interior nodes.
        let root = m.members().last().unwrap().clone();
        let h = ns.get_mut(&root).unwrap().new_tree(TopologyKind::Prefix).unwrap();
        let tree = m.tree(&root, TopologyKind::Prefix).unwrap();
        let interior = tree.members().find(|n| **n != root && tree.child_count(n) > 0).unwrap().clone();
        ns.get_mut(&interior).unwrap().tree(h.tree_id).unwrap();
        let seen = flood(&mut ns, &interior, h.tree_id);
        assert_eq!(seen.len(), tree.subtree(&interior).len() - 1);
        let leaf = tree.members().find(|n| tree.child_count(n) == 0).unwrap().clone();
        ns.get_mut(&leaf).unwrap().tree(h.tree_id).unwrap();
        assert!(flood(&mut ns, &leaf, h.tree_id).is_empty());
    }

    #[test]
    fn up_goes_to_parent_or_local_at_root() {
        let m = membership(32);
        let mut ns = nodes(&m);
        let root = m.members()[0].clone();
        let h = ns.get_mut(&root).unwrap().new_tree(TopologyKind::Direct).unwrap();
        assert_eq!(ns.get_mut(&root).unwrap().up(h.tree_id, b"x").unwrap(), UpSend::Local(b"x".to_vec()));
        let child = m.members()[3].clone();
        let q = ns.get_mut(&child).unwrap();
        q.tree(h.tree_id).unwrap();
        match q.up(h.tree_id, b"v").unwrap() {
            UpSend::Send(out) => {
                assert_eq!(out.to, root);
                let got = ns.get_mut(&root).unwrap().on_frame(out.frame).unwrap();
                assert_eq!(got, Inbound::Up { tree_id: h.tree_id, payload: b"v".to_vec() });
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_tree_is_rejected() {
        let m = membership(4);
        let mut q = QTree::new(m.members()[1].clone(), m.clone()).unwrap();
        assert!(matches!(q.down(42, b""), Err(QTreeError::UnknownTree(42))));
        assert!(q.count_children(42).is_err());
        assert!(q.whats_my_level(42).is_err());
        assert!(q.up(42, b"").is_err());
    }

    #[test]
    fn up_loss_matches_probability() {
        let m = membership(8);
        let me = m.members()[2].clone();
        let root = m.members()[0].clone();
        let mut r = QTree::new(root, m.clone()).unwrap();
        let h = r.new_tree(TopologyKind::Direct).unwrap();
        let mut q = QTree::new(me, m.clone()).unwrap();
        q.tree(h.tree_id).unwrap();
        q.set_up_loss(0.3, 11).unwrap();
        let trials = 20_000;
        let sent = (0..trials)
            .filter(|_| matches!(q.up(h.tree_id, b"").unwrap(), UpSend::Send(_)))
            .count();
        let rate = sent as f64 / trials as f64;
        // 1 - p = 0.7, sigma = sqrt(0.21 / 20000) ~ 0.0032
        assert!((rate - 0.7).abs() < 0.016, "{rate}");
        assert_eq!(q.dropped() as usize, trials - sent);
        assert!(q.set_up_loss(1.5, 0).is_err());
    }
}
