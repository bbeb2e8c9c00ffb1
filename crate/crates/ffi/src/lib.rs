//! C ABI over `acme-core`.
//!
//! Every call returns an [`AcmeStatus`]. On failure the message is kept per
//! thread and read with [`acme_last_error`]. Handles are opaque and owned by
//! the caller until passed to their `_free` function; passing NULL to a
//! `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use acme_core::ising::{AggregateOp, PartialAggregate, ResultTuple};
use acme_core::real::{node_sensors, ClusterConfig, RealError, RealNode, SensorOptions, StartedSensors};
use acme_core::simnet::{report, run_scenario, Scenario, SimError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcmeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    /// A configuration or scenario file was rejected.
    Config = 3,
    Runtime = 4,
    /// The output buffer was too small; the needed size was written.
    BufferTooSmall = 5,
    Panic = 6,
}

struct Failure(AcmeStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AcmeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AcmeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            AcmeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(AcmeStatus::NullArgument, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AcmeStatus::InvalidArgument, msg.into())
}

fn from_sim(e: SimError) -> Failure {
    match e {
        SimError::Config { .. } => Failure(AcmeStatus::Config, e.to_string()),
        other => Failure(AcmeStatus::Runtime, other.to_string()),
    }
}

fn from_real(e: RealError) -> Failure {
    match e {
        RealError::Config { .. } => Failure(AcmeStatus::Config, e.to_string()),
        other => Failure(AcmeStatus::Runtime, other.to_string()),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `s` and a terminating NUL into `buf`. `needed` receives the size
/// including the NUL even when the buffer is too small.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Failure> {
    let n = s.len() + 1;
    if let Some(needed) = needed.as_mut() {
        *needed = n;
    }
    if buf.is_null() || len < n {
        return Err(Failure(AcmeStatus::BufferTooSmall, format!("need {n} bytes, got {len}")));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn acme_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn acme_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Aggregation state for one operator, merged the way tree nodes merge
/// their children.
pub struct AcmeAggregator {
    state: PartialAggregate,
}

/// `op` is one of MIN, MAX, SUM, COUNT, AVG, MEDIAN, VALUE.
///
/// # Safety
/// `op` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn acme_aggregator_new(op: *const c_char, out: *mut *mut AcmeAggregator) -> AcmeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let op: AggregateOp = str_arg(op, "op")?.parse().map_err(|e: acme_core::ising::IsingError| invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(AcmeAggregator { state: PartialAggregate::empty(op) }));
        Ok(())
    })
}

/// Adds one reading reported by `source`.
///
/// # Safety
/// `agg` must come from [`acme_aggregator_new`]; `source` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn acme_aggregator_add(agg: *mut AcmeAggregator, source: *const c_char, value: f64) -> AcmeStatus {
    guard(|| {
        let agg = out_arg(agg, "agg")?;
        let source = str_arg(source, "source")?;
        if source.is_empty() || source.contains(',') {
            return Err(invalid("source must be non-empty and contain no comma"));
        }
        if !value.is_finite() {
            return Err(invalid("value must be finite"));
        }
        let local = PartialAggregate::from_local(agg.state.op, &[ResultTuple::new(source, 0, value.to_string())]);
        agg.state.merge(&local).map_err(|e| invalid(e.to_string()))
    })
}

/// Merges `src` into `dst`. Both must use the same operator.
///
/// # Safety
/// Both handles must come from [`acme_aggregator_new`].
#[no_mangle]
pub unsafe extern "C" fn acme_aggregator_merge(dst: *mut AcmeAggregator, src: *const AcmeAggregator) -> AcmeStatus {
    guard(|| {
        let src = src.as_ref().ok_or_else(|| null("src"))?;
        let dst = out_arg(dst, "dst")?;
        dst.state.merge(&src.state).map_err(|e| invalid(e.to_string()))
    })
}

/// Aggregate value. Fails when no reading has been added or the operator
/// has no single numeric result.
///
/// # Safety
/// `agg` must come from [`acme_aggregator_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acme_aggregator_value(agg: *const AcmeAggregator, out: *mut f64) -> AcmeStatus {
    guard(|| {
        let agg = agg.as_ref().ok_or_else(|| null("agg"))?;
        let out = out_arg(out, "out")?;
        *out = agg.state.scalar().ok_or_else(|| invalid("no value"))?;
        Ok(())
    })
}

/// Number of readings merged so far.
///
/// # Safety
/// `agg` must come from [`acme_aggregator_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acme_aggregator_count(agg: *const AcmeAggregator, out: *mut u64) -> AcmeStatus {
    guard(|| {
        let agg = agg.as_ref().ok_or_else(|| null("agg"))?;
        *out_arg(out, "out")? = agg.state.value_count();
        Ok(())
    })
}

/// # Safety
/// `agg` must come from [`acme_aggregator_new`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn acme_aggregator_free(agg: *mut AcmeAggregator) {
    if !agg.is_null() {
        drop(Box::from_raw(agg));
    }
}

pub struct AcmeScenario {
    scenario: Scenario,
    base: std::path::PathBuf,
}

/// Loads a scenario file. Relative paths inside it resolve against its
/// directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn acme_scenario_load(path: *const c_char, out: *mut *mut AcmeScenario) -> AcmeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = Path::new(str_arg(path, "path")?);
        let scenario = Scenario::load(path).map_err(from_sim)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        *out = Box::into_raw(Box::new(AcmeScenario { scenario, base }));
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`acme_scenario_load`].
#[no_mangle]
pub unsafe extern "C" fn acme_scenario_set_seed(s: *mut AcmeScenario, seed: u64) -> AcmeStatus {
    guard(|| {
        out_arg(s, "scenario")?.scenario.seed = seed;
        Ok(())
    })
}

/// Runs the scenario and writes its CSV tables into `out_dir`.
///
/// # Safety
/// `s` must come from [`acme_scenario_load`]; `out_dir` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn acme_scenario_run(s: *const AcmeScenario, out_dir: *const c_char) -> AcmeStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("scenario"))?;
        let out_dir = Path::new(str_arg(out_dir, "out_dir")?);
        run_scenario(&s.scenario, &s.base, out_dir).map(drop).map_err(from_sim)
    })
}

/// # Safety
/// `s` must come from [`acme_scenario_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn acme_scenario_free(s: *mut AcmeScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Writes the aggregated report tables for a results directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn acme_report(dir: *const c_char) -> AcmeStatus {
    guard(|| report(Path::new(str_arg(dir, "dir")?)).map(drop).map_err(from_sim))
}

pub struct AcmeCluster {
    config: Arc<ClusterConfig>,
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn acme_cluster_load(path: *const c_char, out: *mut *mut AcmeCluster) -> AcmeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config = ClusterConfig::load(Path::new(str_arg(path, "path")?)).map_err(from_real)?;
        *out = Box::into_raw(Box::new(AcmeCluster { config: Arc::new(config) }));
        Ok(())
    })
}

/// # Safety
/// `c` must come from [`acme_cluster_load`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acme_cluster_node_count(c: *const AcmeCluster, out: *mut usize) -> AcmeStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("cluster"))?;
        *out_arg(out, "out")? = c.config.nodes.len();
        Ok(())
    })
}

/// # Safety
/// `c` must come from [`acme_cluster_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn acme_cluster_free(c: *mut AcmeCluster) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// A running node: overlay, ISING endpoint and sensor servers.
pub struct AcmeNode {
    node: Option<RealNode>,
    _sensors: StartedSensors,
}

/// Starts node `index` of the cluster. The node keeps running until
/// [`acme_node_free`]. `ledger_dir` may be NULL.
///
/// # Safety
/// `c` must come from [`acme_cluster_load`]; `ledger_dir` must be NULL or a
/// NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acme_node_start(
    c: *const AcmeCluster,
    index: usize,
    ledger_dir: *const c_char,
    out: *mut *mut AcmeNode,
) -> AcmeStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("cluster"))?;
        let out = out_arg(out, "out")?;
        if index >= c.config.nodes.len() {
            return Err(invalid(format!("index {index} out of range for {} nodes", c.config.nodes.len())));
        }
        let ledger_dir = if ledger_dir.is_null() { None } else { Some(str_arg(ledger_dir, "ledger_dir")?.into()) };
        let sensors = node_sensors(&c.config, index, &SensorOptions { ledger_dir }).map_err(from_real)?;
        let node = RealNode::start(c.config.clone(), index).map_err(from_real)?;
        *out = Box::into_raw(Box::new(AcmeNode { node: Some(node), _sensors: sensors }));
        Ok(())
    })
}

/// `host:port` of the node's `/ising` endpoint.
///
/// # Safety
/// `n` must come from [`acme_node_start`]; `buf` must hold `len` bytes;
/// `needed` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn acme_node_ising_addr(
    n: *const AcmeNode,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> AcmeStatus {
    guard(|| {
        let n = n.as_ref().ok_or_else(|| null("node"))?;
        let addr = n.node.as_ref().expect("running").ising_addr().to_string();
        write_str(&addr, buf, len, needed)
    })
}

/// Stops the node and releases it.
///
/// # Safety
/// `n` must come from [`acme_node_start`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn acme_node_free(n: *mut AcmeNode) {
    if !n.is_null() {
        let mut b = Box::from_raw(n);
        // stop the overlay before the sensors it samples
        b.node.take();
    }
}
