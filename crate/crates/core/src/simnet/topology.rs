use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

/// Nanoseconds of virtual time.
pub type Nanos = u64;

pub const NS_PER_MS: u64 = 1_000_000;

pub fn ms_to_ns(ms: f64) -> Nanos {
    (ms * NS_PER_MS as f64).round().max(0.0) as Nanos
}

pub fn ns_to_ms(ns: Nanos) -> f64 {
    ns as f64 / NS_PER_MS as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkClass {
    StubStub,
    StubTransit,
    TransitTransit,
}

impl LinkClass {
    pub fn bandwidth_bps(self) -> u64 {
        match self {
            LinkClass::StubStub => 100_000_000,
            LinkClass::StubTransit => 1_500_000,
            LinkClass::TransitTransit => 45_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub a: usize,
    pub b: usize,
    pub class: LinkClass,
    pub latency_ns: Nanos,
    pub bandwidth_bps: u64,
}

impl Link {
    /// Time to clock `bytes` onto the wire, rounded up to the nanosecond.
    pub fn service_ns(&self, bytes: u64) -> Nanos {
        let bits = bytes as u128 * 8 * 1_000_000_000;
        bits.div_ceil(self.bandwidth_bps as u128) as Nanos
    }
}

/// One directed traversal of a link: `dir` is 0 for a→b, 1 for b→a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub link: usize,
    pub dir: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyParams {
    pub transit_domains: usize,
    /// Inclusive range of transit routers per domain.
    pub transit_nodes: [usize; 2],
    /// Inclusive range of routers per stub domain.
    pub stub_nodes: [usize; 2],
    /// Stub hosts that must exist; more stub domains are added until there
    /// are at least this many.
    pub min_stub_hosts: usize,
    /// Latency ranges in ms, before calibration.
    pub stub_stub_ms: [f64; 2],
    pub stub_transit_ms: [f64; 2],
    pub intra_transit_ms: [f64; 2],
    pub inter_transit_ms: [f64; 2],
    /// Probability of each extra intra-domain edge beyond the spanning ring.
    pub extra_edge_p: f64,
    /// Target median stub-to-stub round-trip time; every latency is scaled
    /// to hit it. `None` keeps the raw ranges.
    pub ping_median_ms: Option<f64>,
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams {
            transit_domains: 3,
            transit_nodes: [5, 7],
            stub_nodes: [3, 5],
            min_stub_hosts: 512,
            stub_stub_ms: [1.0, 4.0],
            stub_transit_ms: [2.0, 8.0],
            intra_transit_ms: [3.0, 10.0],
            inter_transit_ms: [10.0, 25.0],
            extra_edge_p: 0.3,
            ping_median_ms: Some(70.0),
        }
    }
}

impl TopologyParams {
    fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, why: &str| Err(SimError::Config { field: format!("topology.{field}"), reason: why.into() });
        if self.transit_domains == 0 {
            return bad("transit_domains", "must be at least 1");
        }
        if self.transit_nodes[0] == 0 || self.transit_nodes[0] > self.transit_nodes[1] {
            return bad("transit_nodes", "need 1 <= min <= max");
        }
        if self.stub_nodes[0] == 0 || self.stub_nodes[0] > self.stub_nodes[1] {
            return bad("stub_nodes", "need 1 <= min <= max");
        }
        for (name, r) in [
            ("stub_stub_ms", self.stub_stub_ms),
            ("stub_transit_ms", self.stub_transit_ms),
            ("intra_transit_ms", self.intra_transit_ms),
            ("inter_transit_ms", self.inter_transit_ms),
        ] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(name, "need 0 <= min <= max");
            }
        }
        if !(0.0..=1.0).contains(&self.extra_edge_p) {
            return bad("extra_edge_p", "must be within [0, 1]");
        }
        if let Some(m) = self.ping_median_ms {
            if !(m > 0.0 && m.is_finite()) {
                return bad("ping_median_ms", "must be positive");
            }
        }
        Ok(())
    }
}

/// Transit-stub router graph. Routers `0..transit_count` are transit
/// routers; the rest are stub routers, each of which can host sim nodes.
#[derive(Debug, Clone)]
pub struct SimTopology {
    pub transit_count: usize,
    /// Transit domain of each transit router.
    pub transit_domain: Vec<usize>,
    /// Stub domain of each stub router, indexed by `router - transit_count`.
    pub stub_domain: Vec<usize>,
    pub links: Vec<Link>,
    adj: Vec<Vec<(usize, Hop)>>,
    /// Stub routers in a seed-dependent order; sim node `i` lives on
    /// `hosts[i]`.
    pub hosts: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Connects `nodes` with a ring (a single edge for two) plus random chords.
fn domain_edges(rng: &mut ChaCha8Rng, nodes: &[usize], extra_p: f64) -> Vec<(usize, usize)> {
    let n = nodes.len();
    let mut edges = Vec::new();
    if n < 2 {
        return edges;
    }
    for i in 0..n {
        let j = (i + 1) % n;
        if n == 2 && i == 1 {
            break;
        }
        edges.push((nodes[i], nodes[j]));
    }
    for i in 0..n {
        for j in i + 2..n {
            if (i, j) != (0, n - 1) && rng.random_bool(extra_p) {
                edges.push((nodes[i], nodes[j]));
            }
        }
    }
    edges
}

pub fn generate_topology(seed: u64, params: &TopologyParams) -> Result<SimTopology, SimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut links = Vec::new();
    let mut add = |rng: &mut ChaCha8Rng, a: usize, b: usize, class: LinkClass, range: [f64; 2]| {
        links.push(Link {
            a,
            b,
            class,
            latency_ns: ms_to_ns(uniform(rng, range)),
            bandwidth_bps: class.bandwidth_bps(),
        });
    };

    let mut transit_domain = Vec::new();
    let mut domains: Vec<Vec<usize>> = Vec::new();
    for d in 0..params.transit_domains {
        let size = rng.random_range(params.transit_nodes[0]..=params.transit_nodes[1]);
        let start = transit_domain.len();
        transit_domain.extend(std::iter::repeat_n(d, size));
        domains.push((start..start + size).collect());
    }
    let transit_count = transit_domain.len();
    for dom in &domains {
        for (a, b) in domain_edges(&mut rng, dom, params.extra_edge_p) {
            add(&mut rng, a, b, LinkClass::TransitTransit, params.intra_transit_ms);
        }
    }
    // every pair of domains is joined by one link between random members
    for i in 0..domains.len() {
        for j in i + 1..domains.len() {
            let a = *domains[i].choose(&mut rng).unwrap();
            let b = *domains[j].choose(&mut rng).unwrap();
            add(&mut rng, a, b, LinkClass::TransitTransit, params.inter_transit_ms);
        }
    }

    // stub domains hang off transit routers round-robin until enough hosts
    let mut stub_domain = Vec::new();
    let mut next = transit_count;
    let mut domain_idx = 0;
    while stub_domain.len() < params.min_stub_hosts.max(1) {
        let attach = domain_idx % transit_count;
        let size = rng.random_range(params.stub_nodes[0]..=params.stub_nodes[1]);
        let nodes: Vec<usize> = (next..next + size).collect();
        stub_domain.extend(std::iter::repeat_n(domain_idx, size));
        for (a, b) in domain_edges(&mut rng, &nodes, params.extra_edge_p) {
            add(&mut rng, a, b, LinkClass::StubStub, params.stub_stub_ms);
        }
        add(&mut rng, nodes[0], attach, LinkClass::StubTransit, params.stub_transit_ms);
        next += size;
        domain_idx += 1;
    }

    let mut hosts: Vec<usize> = (transit_count..next).collect();
    hosts.shuffle(&mut rng);
    let mut topo = SimTopology { transit_count, transit_domain, stub_domain, links, adj: Vec::new(), hosts };
    topo.rebuild_adjacency();
    if let Some(target) = params.ping_median_ms {
        let median = topo.stub_ping_median_ms();
        if median > 0.0 {
            let scale = target / median;
            for l in &mut topo.links {
                l.latency_ns = (l.latency_ns as f64 * scale).round() as Nanos;
            }
        }
    }
    Ok(topo)
}

impl SimTopology {
    /// Builds a topology from explicit links; hosts are every stub router in
    /// index order. Mainly for tests and hand-made networks.
    pub fn from_links(transit_count: usize, router_count: usize, links: Vec<Link>) -> Self {
        let mut topo = SimTopology {
            transit_count,
            transit_domain: vec![0; transit_count],
            stub_domain: (transit_count..router_count).map(|_| 0).collect(),
            links,
            adj: Vec::new(),
            hosts: (transit_count..router_count).collect(),
        };
        topo.rebuild_adjacency();
        topo
    }

    fn rebuild_adjacency(&mut self) {
        let n = self.router_count();
        let mut adj = vec![Vec::new(); n];
        for (i, l) in self.links.iter().enumerate() {
            adj[l.a].push((l.b, Hop { link: i, dir: 0 }));
            adj[l.b].push((l.a, Hop { link: i, dir: 1 }));
        }
        self.adj = adj;
    }

    pub fn router_count(&self) -> usize {
        self.transit_count + self.stub_domain.len()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.router_count();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Shortest-latency distances and incoming hops from `src`. Ties go to
    /// the lower router index so routes are deterministic.
    pub fn shortest_paths(&self, src: usize) -> (Vec<Nanos>, Vec<Option<Hop>>) {
        let n = self.router_count();
        let mut dist = vec![Nanos::MAX; n];
        let mut prev = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[src] = 0;
        heap.push(Reverse((0, src)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, hop) in &self.adj[u] {
                let nd = d + self.links[hop.link].latency_ns;
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = Some(hop);
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        (dist, prev)
    }

    /// Median round-trip time over all ordered pairs of distinct stub routers.
    pub fn stub_ping_median_ms(&self) -> f64 {
        let mut rtts = Vec::new();
        for s in self.transit_count..self.router_count() {
            let (dist, _) = self.shortest_paths(s);
            rtts.extend(dist[s + 1..].iter().map(|d| 2 * d));
        }
        if rtts.is_empty() {
            return 0.0;
        }
        rtts.sort_unstable();
        ns_to_ms(rtts[(rtts.len() - 1) / 2])
    }
}

/// Lazily computed, cached router-to-router routes.
#[derive(Debug)]
pub struct Routes {
    topo: Arc<SimTopology>,
    trees: HashMap<usize, (Vec<Nanos>, Vec<Option<Hop>>)>,
    paths: HashMap<(usize, usize), Arc<[Hop]>>,
}

impl Routes {
    pub fn new(topo: Arc<SimTopology>) -> Self {
        Routes { topo, trees: HashMap::new(), paths: HashMap::new() }
    }

    pub fn topology(&self) -> &Arc<SimTopology> {
        &self.topo
    }

    fn tree(&mut self, src: usize) -> &(Vec<Nanos>, Vec<Option<Hop>>) {
        let topo = &self.topo;
        self.trees.entry(src).or_insert_with(|| topo.shortest_paths(src))
    }

    /// One-way propagation latency between two routers, ignoring queueing.
    pub fn latency_ns(&mut self, a: usize, b: usize) -> Nanos {
        self.tree(a).0[b]
    }

    /// Links traversed from `a` to `b`, in order.
    pub fn path(&mut self, a: usize, b: usize) -> Arc<[Hop]> {
        if let Some(p) = self.paths.get(&(a, b)) {
            return p.clone();
        }
        let (_, prev) = self.tree(a).clone();
        let mut hops = Vec::new();
        let mut at = b;
        while at != a {
            let hop = prev[at].expect("topology is connected");
            hops.push(hop);
            let l = &self.topo.links[hop.link];
            at = if hop.dir == 0 { l.a } else { l.b };
        }
        hops.reverse();
        let p: Arc<[Hop]> = hops.into();
        self.paths.insert((a, b), p.clone());
        p
    }

    pub fn endpoint(&self, hop: Hop) -> usize {
        let l = &self.topo.links[hop.link];
        if hop.dir == 0 {
            l.b
        } else {
            l.a
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_topology() {
        let p = TopologyParams { min_stub_hosts: 64, ..Default::default() };
        let a = generate_topology(3, &p).unwrap();
        let b = generate_topology(3, &p).unwrap();
        assert_eq!(a.links, b.links);
        assert_eq!(a.hosts, b.hosts);
        let c = generate_topology(4, &p).unwrap();
        assert_ne!(a.links, c.links);
    }

    #[test]
    fn default_shape() {
        for seed in 0..5 {
            let t = generate_topology(seed, &TopologyParams::default()).unwrap();
            assert!((15..=21).contains(&t.transit_count), "{}", t.transit_count);
            assert!(t.hosts.len() >= 512);
            assert!(t.is_connected());
            for l in &t.links {
                assert_eq!(l.bandwidth_bps, l.class.bandwidth_bps());
                let stub = |r: usize| r >= t.transit_count;
                let want = match (stub(l.a), stub(l.b)) {
                    (true, true) => LinkClass::StubStub,
                    (false, false) => LinkClass::TransitTransit,
                    _ => LinkClass::StubTransit,
                };
                assert_eq!(l.class, want);
            }
        }
    }

    #[test]
    fn ping_median_calibrated() {
        let t = generate_topology(11, &TopologyParams::default()).unwrap();
        // independent O(V^2) Dijkstra over the raw link list
        let n = t.router_count();
        let mut w = vec![Vec::new(); n];
        for l in &t.links {
            w[l.a].push((l.b, l.latency_ns));
            w[l.b].push((l.a, l.latency_ns));
        }
        let mut rtts = Vec::new();
        for s in t.transit_count..n {
            let mut dist = vec![u64::MAX; n];
            let mut done = vec![false; n];
            dist[s] = 0;
            for _ in 0..n {
                let u = (0..n).filter(|&i| !done[i]).min_by_key(|&i| dist[i]).unwrap();
                done[u] = true;
                for &(v, c) in &w[u] {
                    dist[v] = dist[v].min(dist[u] + c);
                }
            }
            rtts.extend(dist[s + 1..].iter().map(|d| 2.0 * *d as f64 / 1e6));
        }
        rtts.sort_by(f64::total_cmp);
        let median = rtts[(rtts.len() - 1) / 2];
        assert!((35.0..=140.0).contains(&median), "median {median}");
        assert!((median - t.stub_ping_median_ms()).abs() < 1e-6);
    }

    #[test]
    fn paths_follow_links() {
        let t = Arc::new(generate_topology(1, &TopologyParams { min_stub_hosts: 40, ..Default::default() }).unwrap());
        let mut r = Routes::new(t.clone());
        let (a, b) = (t.hosts[0], t.hosts[1]);
        let p = r.path(a, b);
        let mut at = a;
        let mut total = 0;
        for hop in p.iter() {
            let l = &t.links[hop.link];
            assert_eq!(if hop.dir == 0 { l.a } else { l.b }, at);
            at = r.endpoint(*hop);
            total += l.latency_ns;
        }
        assert_eq!(at, b);
        assert_eq!(total, r.latency_ns(a, b));
        assert_eq!(r.latency_ns(a, b), r.latency_ns(b, a));
    }

    #[test]
    fn bad_params_name_the_field() {
        let p = TopologyParams { stub_nodes: [4, 2], ..Default::default() };
        let e = generate_topology(1, &p).unwrap_err().to_string();
        assert!(e.contains("topology.stub_nodes"), "{e}");
    }

    #[test]
    fn service_time_arithmetic() {
        let l = Link { a: 0, b: 1, class: LinkClass::TransitTransit, latency_ns: ms_to_ns(10.0), bandwidth_bps: 45_000_000 };
        assert_eq!(l.service_ns(450) + l.latency_ns, ms_to_ns(10.08));
    }
}
