//! Deterministic discrete-event simulator.
//!
//! A transit-stub router graph carries messages over store-and-forward
//! links with per-direction FIFO queues. Each simulated host runs the same
//! [`IsingNode`](crate::ising::IsingNode) code as a real deployment; only
//! transport and clock are swapped. All randomness derives from one master
//! seed, so a run is reproducible bit for bit.

mod control;
mod experiments;
mod lookup;
mod net;
mod report;
mod scenario;
mod sim;
mod topology;

use thiserror::Error;

pub use control::{virtual_processes, LoadScript, LoadSpike, NodeProcesses, ServerBackend, SimControl};
pub use experiments::{
    fit_slope, median, parent_edge_latency_by_depth, run_bytes_experiment, run_depth_experiment,
    run_latency_experiment, run_loss_experiment, summarize_latency, BytesRow, DepthRow, LatencyRow,
    LatencySummaryRow, LossRow, Setup, VALUE_PORT, VALUE_SENSOR,
};
pub use lookup::{
    run_lookup_experiment, surrogate_owner, LookupMinute, LookupParams, LookupRecord, LookupSim, TimedInvocation,
};
pub use net::{EventQueue, LinkStats, Network};
pub use report::report;
pub use scenario::{
    run_scenario, run_trigger_scenario, DepthSpec, ExperimentKind, GridSpec, LossSpec, Scenario, TriggerRun,
    TriggerSpecFile,
};
pub use sim::{
    id_name, sim_node_name, stream_seed, ByteCounters, InternalValues, QueryOutcome, SensorBackend, Sim, SimParams,
};
pub use topology::{
    generate_topology, ms_to_ns, ns_to_ms, Hop, Link, LinkClass, Nanos, Routes, SimTopology, TopologyParams,
    NS_PER_MS,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{field}: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Tree(#[from] crate::qtree::QTreeError),
    #[error(transparent)]
    Ising(#[from] crate::ising::IsingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
