use std::collections::BTreeSet;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::RealError;
use crate::ising::IsingConfig;
use crate::qtree::{node_id_from_name, Membership, NodeId, TopologyKind, DEFAULT_DIGITS};

fn bad(field: impl Into<String>, reason: impl Into<String>) -> RealError {
    RealError::Config { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    /// Address this node binds and is reached at.
    pub host: IpAddr,
    /// File holding this node's load value; the system load average when absent.
    #[serde(default)]
    pub load_file: Option<PathBuf>,
}

/// A static deployment: every node, the shared port plan and ISING timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    /// TCP port for QTree frames.
    #[serde(default = "default_overlay_port")]
    pub overlay_port: u16,
    /// HTTP port of each node's `/ising` endpoint.
    #[serde(default = "default_ising_port")]
    pub ising_port: u16,
    /// Ports every node serves its sensors and actuators on.
    #[serde(default = "default_sensor_ports")]
    pub sensor_ports: Vec<u16>,
    #[serde(default = "default_tree")]
    pub tree: TopologyKind,
    #[serde(default = "default_digits")]
    pub id_digits: usize,
    /// Upper bound on a single local sensor or actuator call.
    #[serde(default = "default_fetch_timeout")]
    pub fetch_timeout_ms: u64,
    /// Virtual application instances each node starts with.
    #[serde(default)]
    pub instances_per_node: u64,
    /// Command run by the start actuator; virtual instances when empty.
    #[serde(default)]
    pub app_command: Vec<String>,
    #[serde(default)]
    pub ising: IsingConfig,
    pub nodes: Vec<NodeConfig>,
}

fn default_overlay_port() -> u16 {
    7700
}
fn default_ising_port() -> u16 {
    8000
}
fn default_sensor_ports() -> Vec<u16> {
    vec![9000, 9100]
}
fn default_tree() -> TopologyKind {
    TopologyKind::Prefix
}
fn default_digits() -> usize {
    DEFAULT_DIGITS
}
fn default_fetch_timeout() -> u64 {
    5000
}

impl ClusterConfig {
    pub fn parse(text: &str) -> Result<ClusterConfig, RealError> {
        let cfg: ClusterConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].trim().to_owned()).filter(|s| !s.is_empty());
            bad(field.unwrap_or_else(|| "cluster".into()), e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ClusterConfig, RealError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(path.display().to_string(), e.to_string()))?;
        ClusterConfig::parse(&text)
    }

    /// A loopback cluster of `n` nodes on `127.0.0.2`, `127.0.0.3`, ...
    pub fn loopback(n: usize, base_port: u16) -> ClusterConfig {
        ClusterConfig {
            overlay_port: base_port,
            ising_port: base_port + 1,
            sensor_ports: vec![base_port + 2, base_port + 3],
            tree: TopologyKind::Prefix,
            id_digits: DEFAULT_DIGITS,
            fetch_timeout_ms: default_fetch_timeout(),
            instances_per_node: 0,
            app_command: Vec::new(),
            ising: IsingConfig::default(),
            nodes: (0..n)
                .map(|i| NodeConfig {
                    name: format!("n{i}"),
                    host: IpAddr::from([127, 0, (i / 250) as u8, (i % 250 + 2) as u8]),
                    load_file: None,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), RealError> {
        if self.nodes.is_empty() {
            return Err(bad("nodes", "at least one node is required"));
        }
        if self.sensor_ports.is_empty() {
            return Err(bad("sensor_ports", "at least one port is required"));
        }
        if !(1..=64).contains(&self.id_digits) {
            return Err(bad("id_digits", "must be in 1..=64"));
        }
        let ports: BTreeSet<u16> =
            [self.overlay_port, self.ising_port].into_iter().chain(self.sensor_ports.iter().copied()).collect();
        if ports.len() != 2 + self.sensor_ports.len() || ports.contains(&0) {
            return Err(bad("sensor_ports", "overlay, ising and sensor ports must be distinct and nonzero"));
        }
        let mut names = BTreeSet::new();
        let mut hosts = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.name.is_empty() {
                return Err(bad(format!("nodes[{i}].name"), "must not be empty"));
            }
            if !names.insert(&n.name) {
                return Err(bad(format!("nodes[{i}].name"), format!("duplicate name {}", n.name)));
            }
            if !hosts.insert(n.host) {
                return Err(bad(format!("nodes[{i}].host"), format!("{} already used by another node", n.host)));
            }
            let id = node_id_from_name(&n.name, self.id_digits).map_err(|e| bad(format!("nodes[{i}].name"), e.to_string()))?;
            if !ids.insert(id) {
                return Err(bad(format!("nodes[{i}].name"), "node id collides with another node"));
            }
        }
        Ok(())
    }

    pub fn node_id(&self, index: usize) -> NodeId {
        node_id_from_name(&self.nodes[index].name, self.id_digits).expect("validated")
    }

    /// Finds a node by name or host address.
    pub fn find(&self, key: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == key || n.host.to_string() == key)
    }

    pub fn overlay_addr(&self, index: usize) -> SocketAddr {
        SocketAddr::new(self.nodes[index].host, self.overlay_port)
    }

    /// `host:port` of a node's `/ising` endpoint.
    pub fn ising_addr(&self, index: usize) -> SocketAddr {
        SocketAddr::new(self.nodes[index].host, self.ising_port)
    }

    /// Every node's ISING endpoint, as `host:port` strings.
    pub fn roots(&self) -> Vec<String> {
        (0..self.nodes.len()).map(|i| self.ising_addr(i).to_string()).collect()
    }

    /// Membership over all nodes. Real mode has no latency measurements,
    /// so every pair counts as equally close and ties fall to the
    /// smallest id.
    pub fn membership(&self) -> Arc<Membership> {
        Arc::new(Membership::new((0..self.nodes.len()).map(|i| self.node_id(i)), |_, _| 1.0))
    }
}
