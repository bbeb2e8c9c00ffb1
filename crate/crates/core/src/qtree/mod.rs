//! Spanning-tree overlay used for query broadcast and result collection.
//!
//! Two shapes are supported: a star where every node talks straight to the
//! root (DTREE) and a tree induced by base-4 prefix routing toward the root
//! (TTREE). Trees are built once over a static membership; a dead node simply
//! stops contributing, taking its subtree with it.

mod id;
mod overlay;
mod tree;

use thiserror::Error;

pub use id::{node_id_from_name, NodeId, BASE, DEFAULT_DIGITS};
pub use overlay::{
    Direction, Frame, Inbound, Membership, Outgoing, QTree, TreeHandle, TreeId, UpSend,
    FRAME_HEADER_LEN,
};
pub use tree::{build_tree, next_hop, TopologyKind, TreeStats, TreeStructure};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QTreeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown tree id {0:#x}")]
    UnknownTree(u64),
    #[error("malformed frame: {0}")]
    Wire(String),
}
