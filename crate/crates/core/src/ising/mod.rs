//! In-network aggregation of sensor queries over a QTree.
//!
//! A root instance turns a user query into a broadcast; every instance then
//! samples its local sensor once per epoch, folds in whatever its children
//! sent for that epoch and passes the partial aggregate to its parent, either
//! when all children reported or when its depth-scaled timeout expires.

mod exact_sum;
mod node;
mod partial;
mod query;
mod root;
mod select;

use thiserror::Error;

pub use exact_sum::ExactSum;
pub use node::{
    node_timeout, Action, IsingConfig, IsingMessage, IsingNode, MessageClass, NodeCounters, Timer,
};
pub use partial::{AggregateOp, Datum, PartialAggregate, PartialState, ResultTuple};
pub use query::{
    parse_predicate, parse_query, Clause, Comparator, Connective, HostScope, Operand, PredicateExpr,
    Selection, SensorQuery, SensorRef,
};
pub use root::{fanin_local, parse_response, root_respond};
pub use select::{apply_selection, compare_values, eval_predicate, sample_local, LocalFetch};

use crate::qtree::QTreeError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IsingError {
    #[error("bad query field `{field}`: {reason}")]
    Parse { field: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed message: {0}")]
    Wire(String),
    #[error(transparent)]
    Tree(#[from] QTreeError),
}
