//! Real deployments: ISING nodes talking QTree frames over TCP, with the
//! root's query interface and every node's sensors served over HTTP.
//!
//! A cluster file lists the nodes. Every node uses the same port numbers
//! on its own host address, so a loopback deployment gives each node its
//! own `127.0.0.x` address.

mod config;
mod node;
mod transport;

use thiserror::Error;

pub use config::{ClusterConfig, NodeConfig};
pub use node::{node_sensors, read_ledger, RealNode, SensorOptions, StartedSensors};
pub use transport::{FrameListener, Peers};

#[derive(Debug, Error)]
pub enum RealError {
    #[error("{field}: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
