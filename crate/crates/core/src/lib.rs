//! Monitoring and control for large distributed deployments.
//!
//! * [`qtree`] builds spanning-tree overlays over a static membership.
//! * [`ising`] runs continuous and snapshot sensor queries over a tree,
//!   aggregating in-network with timeout-driven partial results.
//! * [`sensact`] hosts HTTP sensors and actuators.
//! * [`entrie`] evaluates trigger rules and fires actuators.
//! * [`simnet`] is a deterministic discrete-event network simulator that
//!   runs the same node logic over a transit-stub topology.
//! * [`real`] wires nodes to TCP and HTTP for loopback or LAN deployments.

pub mod clock;
pub mod entrie;
pub mod ising;
pub mod qtree;
pub mod real;
pub mod sensact;
pub mod simnet;
