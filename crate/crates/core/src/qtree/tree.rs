use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::id::{NodeId, BASE};
use super::QTreeError;

/// Shape of the spanning tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopologyKind {
    /// Star: every node is a direct child of the root.
    #[serde(rename = "DTREE")]
    Direct,
    /// Tree induced by prefix-routing paths toward the root.
    #[serde(rename = "TTREE")]
    Prefix,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::Direct => "DTREE",
            TopologyKind::Prefix => "TTREE",
        })
    }
}

impl FromStr for TopologyKind {
    type Err = QTreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DTREE" => Ok(TopologyKind::Direct),
            "TTREE" => Ok(TopologyKind::Prefix),
            other => Err(QTreeError::InvalidArgument(format!("unknown tree kind {other:?}"))),
        }
    }
}

/// Picks the parent of `v` on its prefix-routing path toward `root`.
///
/// With `l` the prefix `v` shares with `root`, candidates are the members
/// whose first `l` digits match the root and whose digit at position `l` is
/// the desired one (initially the root's own). When no member carries that
/// digit the desired digit is incremented mod 4 (surrogate step); the root
/// always matches its own digit, so the search terminates. The closest
/// candidate by `latency(v, w)` wins, ties going to the smaller id.
pub fn next_hop<F>(
    v: &NodeId,
    root: &NodeId,
    members: &BTreeSet<NodeId>,
    latency: F,
) -> Result<NodeId, QTreeError>
where
    F: Fn(&NodeId, &NodeId) -> f64,
{
    if members.is_empty() {
        return Err(QTreeError::InvalidArgument("empty membership".into()));
    }
    if !members.contains(v) {
        return Err(QTreeError::InvalidArgument(format!("{v} is not a member")));
    }
    if !members.contains(root) {
        return Err(QTreeError::InvalidArgument(format!("root {root} is not a member")));
    }
    if v == root {
        return Err(QTreeError::InvalidArgument("the root has no next hop".into()));
    }
    if v.len() != root.len() {
        return Err(QTreeError::InvalidArgument("mixed id widths".into()));
    }
    let level = v.shared_prefix(root);
    let wanted = root.digit(level);
    for step in 0..BASE {
        let digit = (wanted + step) % BASE;
        let best = members
            .iter()
            .filter(|w| *w != v)
            .filter(|w| w.shared_prefix(root) >= level && w.digit(level) == digit)
            .map(|w| (latency(v, w), w))
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        if let Some((_, w)) = best {
            return Ok(w.clone());
        }
    }
    unreachable!("the root always matches its own digit")
}

/// A rooted spanning tree over a static membership.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeStructure {
    pub kind: TopologyKind,
    pub root: NodeId,
    pub parent: BTreeMap<NodeId, NodeId>,
    pub children: BTreeMap<NodeId, BTreeSet<NodeId>>,
    pub depth: BTreeMap<NodeId, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeStats {
    pub avg_depth: f64,
    pub max_depth: usize,
    /// `depth_histogram[d]` is the number of members at depth `d`.
    pub depth_histogram: Vec<usize>,
}

/// Builds the DTREE or TTREE over `members` rooted at `root`. Pure: the same
/// inputs always give the same tree.
pub fn build_tree<F>(
    members: &BTreeSet<NodeId>,
    root: &NodeId,
    kind: TopologyKind,
    latency: F,
) -> Result<TreeStructure, QTreeError>
where
    F: Fn(&NodeId, &NodeId) -> f64,
{
    if !members.contains(root) {
        return Err(QTreeError::InvalidArgument(format!("root {root} is not a member")));
    }
    let mut parent = BTreeMap::new();
    for v in members.iter().filter(|v| *v != root) {
        let p = match kind {
            TopologyKind::Direct => root.clone(),
            TopologyKind::Prefix => next_hop(v, root, members, &latency)?,
        };
        parent.insert(v.clone(), p);
    }
    TreeStructure::from_parents(kind, root.clone(), members, parent)
}

impl TreeStructure {
    /// Assembles a tree from explicit parent pointers, checking that they form
    /// a spanning tree of `members`.
    pub fn from_parents(
        kind: TopologyKind,
        root: NodeId,
        members: &BTreeSet<NodeId>,
        parent: BTreeMap<NodeId, NodeId>,
    ) -> Result<Self, QTreeError> {
        let mut children: BTreeMap<NodeId, BTreeSet<NodeId>> =
            members.iter().map(|m| (m.clone(), BTreeSet::new())).collect();
        for (c, p) in &parent {
            children
                .get_mut(p)
                .ok_or_else(|| QTreeError::InvalidArgument(format!("parent {p} is not a member")))?
                .insert(c.clone());
        }
        // Breadth-first from the root assigns depths and proves reachability.
        let mut depth = BTreeMap::new();
        depth.insert(root.clone(), 0usize);
        let mut frontier = vec![root.clone()];
        while let Some(n) = frontier.pop() {
            let d = depth[&n];
            for c in &children[&n] {
                if depth.insert(c.clone(), d + 1).is_some() {
                    return Err(QTreeError::InvalidArgument("cycle in parent pointers".into()));
                }
                frontier.push(c.clone());
            }
        }
        if depth.len() != members.len() {
            return Err(QTreeError::InvalidArgument(format!(
                "{} of {} members unreachable from root",
                members.len() - depth.len(),
                members.len()
            )));
        }
        Ok(TreeStructure { kind, root, parent, children, depth })
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn contains(&self, n: &NodeId) -> bool {
        self.depth.contains_key(n)
    }

    pub fn members(&self) -> impl Iterator<Item = &NodeId> {
        self.depth.keys()
    }

    pub fn parent_of(&self, n: &NodeId) -> Option<&NodeId> {
        self.parent.get(n)
    }

    pub fn children_of(&self, n: &NodeId) -> impl Iterator<Item = &NodeId> {
        self.children.get(n).into_iter().flatten()
    }

    pub fn child_count(&self, n: &NodeId) -> usize {
        self.children.get(n).map_or(0, BTreeSet::len)
    }

    pub fn depth_of(&self, n: &NodeId) -> Option<usize> {
        self.depth.get(n).copied()
    }

    pub fn max_depth(&self) -> usize {
        self.depth.values().copied().max().unwrap_or(0)
    }

    /// Members in the subtree rooted at `n`, `n` included.
    pub fn subtree(&self, n: &NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![n.clone()];
        while let Some(x) = stack.pop() {
            stack.extend(self.children_of(&x).cloned());
            out.push(x);
        }
        out
    }

    /// Subtree size for every member, computed bottom-up in one pass.
    pub fn subtree_sizes(&self) -> BTreeMap<NodeId, usize> {
        let mut order: Vec<_> = self.depth.iter().collect();
        order.sort_by(|a, b| b.1.cmp(a.1));
        let mut sizes: BTreeMap<NodeId, usize> = BTreeMap::new();
        for (n, _) in order {
            let s = 1 + self.children_of(n).map(|c| sizes[c]).sum::<usize>();
            sizes.insert(n.clone(), s);
        }
        sizes
    }

    pub fn stats(&self) -> TreeStats {
        let max_depth = self.max_depth();
        let mut depth_histogram = vec![0; max_depth + 1];
        for d in self.depth.values() {
            depth_histogram[*d] += 1;
        }
        let total: usize = self.depth.values().sum();
        TreeStats {
            avg_depth: total as f64 / self.len().max(1) as f64,
            max_depth,
            depth_histogram,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtree::id::{node_id_from_name, DEFAULT_DIGITS};

    fn ids(n: usize) -> BTreeSet<NodeId> {
        (0..n).map(|i| node_id_from_name(&format!("node-{i}"), DEFAULT_DIGITS).unwrap()).collect()
    }

    fn flat(_: &NodeId, _: &NodeId) -> f64 {
        1.0
    }

    #[test]
    fn lone_pair_routes_to_root() {
        let members = ids(2);
        let mut it = members.iter();
        let (a, b) = (it.next().unwrap(), it.next().unwrap());
        assert_eq!(next_hop(a, b, &members, flat).unwrap(), *b);
        assert_eq!(next_hop(b, a, &members, flat).unwrap(), *a);
    }

    #[test]
    fn near_complete_prefix_goes_straight_to_root() {
        let root = NodeId::from_digits(vec![1, 2, 3, 0]).unwrap();
        let v = NodeId::from_digits(vec![1, 2, 3, 1]).unwrap();
        let other = NodeId::from_digits(vec![1, 2, 0, 0]).unwrap();
        let members: BTreeSet<_> = [root.clone(), v.clone(), other].into();
        assert_eq!(next_hop(&v, &root, &members, flat).unwrap(), root);
    }

    #[test]
    fn next_hop_prefers_low_latency_then_small_id() {
        let root = NodeId::from_digits(vec![0, 0, 0]).unwrap();
        let v = NodeId::from_digits(vec![3, 3, 3]).unwrap();
        let near = NodeId::from_digits(vec![0, 2, 2]).unwrap();
        let far = NodeId::from_digits(vec![0, 1, 1]).unwrap();
        let members: BTreeSet<_> = [root.clone(), v.clone(), near.clone(), far.clone()].into();
        let lat = |_: &NodeId, w: &NodeId| if *w == near { 1.0 } else { 5.0 };
        assert_eq!(next_hop(&v, &root, &members, lat).unwrap(), near);
        // equal latency: smallest id among {root, near, far} is the root
        assert_eq!(next_hop(&v, &root, &members, flat).unwrap(), root);
    }

    #[test]
    fn next_hop_rejects_bad_arguments() {
        let members = ids(4);
        let root = members.iter().next().unwrap().clone();
        let stranger = node_id_from_name("stranger", DEFAULT_DIGITS).unwrap();
        assert!(next_hop(&stranger, &root, &members, flat).is_err());
        assert!(next_hop(&root, &root, &members, flat).is_err());
        assert!(next_hop(&root, &root, &BTreeSet::new(), flat).is_err());
    }

    #[test]
    fn dtree_is_a_star() {
        let members = ids(64);
        let root = members.iter().nth(7).unwrap().clone();
        let t = build_tree(&members, &root, TopologyKind::Direct, flat).unwrap();
        assert_eq!(t.child_count(&root), 63);
        assert!(t.members().filter(|m| **m != root).all(|m| t.depth_of(m) == Some(1)));
        let s = t.stats();
        assert!((s.avg_depth - 63.0 / 64.0).abs() < 1e-12);
        assert_eq!(s.depth_histogram.iter().sum::<usize>(), 64);
    }

    #[test]
    fn single_member_tree() {
        let members = ids(1);
        let root = members.iter().next().unwrap().clone();
        let t = build_tree(&members, &root, TopologyKind::Prefix, flat).unwrap();
        assert!(t.parent.is_empty());
        assert_eq!(t.stats().max_depth, 0);
    }

    #[test]
    fn ttree_edges_sum_to_n_minus_one() {
        let members = ids(200);
        let root = members.iter().nth(3).unwrap().clone();
        let t = build_tree(&members, &root, TopologyKind::Prefix, flat).unwrap();
        let edges: usize = t.members().map(|m| t.child_count(m)).sum();
        assert_eq!(edges, 199);
        for m in t.members() {
            assert!(t.depth_of(m).unwrap() <= 2 * DEFAULT_DIGITS);
        }
        let sizes = t.subtree_sizes();
        assert_eq!(sizes[&root], 200);
        for m in t.members() {
            assert_eq!(sizes[m], t.subtree(m).len());
        }
    }

    #[test]
    fn cyclic_parents_rejected() {
        let members = ids(3);
        let v: Vec<_> = members.iter().cloned().collect();
        let parent = BTreeMap::from([(v[1].clone(), v[2].clone()), (v[2].clone(), v[1].clone())]);
        assert!(TreeStructure::from_parents(TopologyKind::Prefix, v[0].clone(), &members, parent).is_err());
    }
}
