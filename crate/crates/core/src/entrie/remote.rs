use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use super::config::NodeSpec;
use super::engine::{Executor, Invocation, SensorFetch, SensorSource, Target};
use crate::ising::{parse_response, AggregateOp, HostScope, ResultTuple, SensorQuery};
use crate::sensact::{http_get, ActuatorResult, SensorServer};

fn direct_rows(node: &str, body: &str, now_ms: u64) -> Vec<ResultTuple> {
    body.lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(|l| ResultTuple::new(node, now_ms, l))
        .collect()
}

/// Path and query for invoking `actuator` with `args`.
fn actuator_path(actuator: &str, args: &str) -> String {
    if args.is_empty() {
        format!("/{actuator}")
    } else {
        format!("/{actuator}?{args}")
    }
}

/// Reads sensors over HTTP: ALL-node conditions through ISING roots in
/// failover order, single-node conditions straight from the sensor server.
#[derive(Debug)]
pub struct HttpSensorSource {
    pub timeout: Duration,
    failovers: u64,
    last_root: Option<String>,
}

impl HttpSensorSource {
    pub fn new(timeout: Duration) -> Self {
        HttpSensorSource { timeout, failovers: 0, last_root: None }
    }

    /// How many times a root other than the first had to be used.
    pub fn failovers(&self) -> u64 {
        self.failovers
    }

    pub fn last_root(&self) -> Option<&str> {
        self.last_root.as_deref()
    }
}

/// Sends `path` to each root in turn until one answers.
fn with_failover(roots: &[String], path: &str, timeout: Duration) -> Result<(usize, String), String> {
    let mut errors = Vec::new();
    for (i, root) in roots.iter().enumerate() {
        match http_get(&format!("http://{root}{path}"), timeout) {
            Ok(body) => return Ok((i, body)),
            Err(e) => {
                log::info!("root {root} failed, trying next: {e}");
                errors.push(e.to_string());
            }
        }
    }
    Err(format!("all roots failed: {}", errors.join("; ")))
}

impl SensorSource for HttpSensorSource {
    fn fetch(&mut self, now_ms: u64, req: &SensorFetch<'_>) -> Result<Vec<ResultTuple>, String> {
        match req.node {
            NodeSpec::Host { host, port } => {
                let node = format!("{host}:{port}");
                let body = http_get(&format!("http://{node}/{}", req.sensor), self.timeout).map_err(|e| e.to_string())?;
                Ok(direct_rows(&node, &body, now_ms))
            }
            NodeSpec::All { port } => {
                let q = SensorQuery::new(*port, req.sensor, HostScope::All, req.op, 0);
                let (i, body) = with_failover(req.roots, &q.to_url(), self.timeout)?;
                if i > 0 {
                    self.failovers += 1;
                }
                self.last_root = Some(req.roots[i].clone());
                let epochs = parse_response(&body).map_err(|e| e.to_string())?;
                Ok(epochs.into_iter().next().unwrap_or_default())
            }
            NodeSpec::Variable { .. } => Err("sensor conditions cannot target VARIABLE_host".into()),
        }
    }
}

/// Folds the per-node acknowledgements of an ALL invocation into one.
pub fn combine_acks(tuples: &[ResultTuple]) -> ActuatorResult {
    let mut failed = Vec::new();
    for t in tuples {
        match ActuatorResult::parse(&t.data) {
            Some(a) if a.is_ok() => {}
            Some(a) => failed.push(format!("{}: {}", t.source, a.detail)),
            None => failed.push(format!("{}: unreadable ack {:?}", t.source, t.data)),
        }
    }
    if tuples.is_empty() {
        ActuatorResult::error("no node acknowledged")
    } else if failed.is_empty() {
        ActuatorResult::ok(format!("{} nodes acknowledged", tuples.len()))
    } else {
        ActuatorResult::error(failed.join("; "))
    }
}

/// Invokes actuators over HTTP. ALL-node invocations go through an ISING
/// root as a snapshot VALUE query on the actuator, which runs it on every
/// node and gathers the acknowledgements.
#[derive(Debug)]
pub struct HttpExecutor {
    /// `host:port` of the actuator server used for [`Target::Local`].
    pub local: Option<String>,
    pub timeout: Duration,
}

impl HttpExecutor {
    pub fn new(local: Option<String>, timeout: Duration) -> Self {
        HttpExecutor { local, timeout }
    }
}

impl Executor for HttpExecutor {
    fn invoke(&mut self, _now_ms: u64, inv: &Invocation) -> ActuatorResult {
        let path = actuator_path(&inv.actuator, &inv.args);
        let node = match &inv.target {
            Target::Local => match &self.local {
                Some(l) => l.clone(),
                None => return ActuatorResult::error("no local actuator server configured"),
            },
            Target::Node(n) => n.clone(),
            Target::All { port } => {
                let name = path.trim_start_matches('/');
                let q = SensorQuery::new(*port, name, HostScope::All, AggregateOp::Value, 0);
                return match with_failover(&inv.roots, &q.to_url(), self.timeout) {
                    Ok((_, body)) => match parse_response(&body) {
                        Ok(epochs) => combine_acks(epochs.first().map(Vec::as_slice).unwrap_or(&[])),
                        Err(e) => ActuatorResult::error(e.to_string()),
                    },
                    Err(e) => ActuatorResult::error(e),
                };
            }
        };
        match http_get(&format!("http://{node}{path}"), self.timeout) {
            Ok(body) => ActuatorResult::parse(&body)
                .unwrap_or_else(|| ActuatorResult::error(format!("unreadable ack {body:?}"))),
            Err(e) => ActuatorResult::error(e.to_string()),
        }
    }
}

/// Invokes actuators on in-memory sensor servers, keyed by `host:port`.
#[derive(Debug, Default)]
pub struct InProcessExecutor {
    pub local: Option<Arc<SensorServer>>,
    pub nodes: BTreeMap<String, Arc<SensorServer>>,
}

impl InProcessExecutor {
    fn call(server: &SensorServer, path: &str) -> ActuatorResult {
        let resp = server.serve_sensor_request(path);
        let status = resp.status;
        let body = resp.into_text();
        if status != 200 {
            return ActuatorResult::error(format!("HTTP {status}: {}", body.trim()));
        }
        ActuatorResult::parse(&body).unwrap_or_else(|| ActuatorResult::error(format!("unreadable ack {body:?}")))
    }
}

impl Executor for InProcessExecutor {
    fn invoke(&mut self, now_ms: u64, inv: &Invocation) -> ActuatorResult {
        let path = actuator_path(&inv.actuator, &inv.args);
        match &inv.target {
            Target::Local => match &self.local {
                Some(s) => Self::call(s, &path),
                None => ActuatorResult::error("no local actuator server"),
            },
            Target::Node(n) => match self.nodes.get(n) {
                Some(s) => Self::call(s, &path),
                None => ActuatorResult::error(format!("unknown node {n}")),
            },
            Target::All { port } => {
                let suffix = format!(":{port}");
                let tuples: Vec<ResultTuple> = self
                    .nodes
                    .iter()
                    .filter(|(k, _)| k.ends_with(&suffix))
                    .map(|(k, s)| ResultTuple::new(k.clone(), now_ms, Self::call(s, &path).to_csv_line().trim_end()))
                    .collect();
                combine_acks(&tuples)
            }
        }
    }
}
