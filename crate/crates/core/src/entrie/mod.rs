//! Trigger engine: conditions over timers, completed actions and sensor
//! histories gate actuator-invoking actions.
//!
//! Configurations are XML lists of `<action>` elements, each with its
//! `<params>`, an optional `<repeat>` policy and a `<conditions>` block whose
//! conditions must all hold for the action to run.

mod config;
mod engine;
mod remote;

use thiserror::Error;

pub use config::{
    parse_config, ActionSpec, ConditionSpec, Dist, NodeSpec, RepeatMode, RepeatPolicy, Rhs, SensorCondition,
    TriggerSpec,
};
pub use engine::{
    eval_sensor, evaluation_tick, trigger_loop, write_transcript, Clock, CondEval, ConditionHistory, Executor,
    Invocation, Reading, RepeatState, SensorFetch, SensorSource, SimClock, Target, TranscriptRow, TriggerEngine,
    WallClock,
};
pub use remote::{combine_acks, HttpExecutor, HttpSensorSource, InProcessExecutor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntrieError {
    #[error("trigger config: {0}")]
    Config(String),
}
