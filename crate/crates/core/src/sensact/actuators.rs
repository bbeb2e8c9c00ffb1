use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Handler, Reply, SensorRequest};
use crate::clock::NowFn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AckStatus {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "ERROR")]
    Error,
}

impl AckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AckStatus::Ok => "OK",
            AckStatus::Error => "ERROR",
        }
    }
}

/// Acknowledgement returned by every actuator, one CSV row `status,detail`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActuatorResult {
    pub status: AckStatus,
    pub detail: String,
}

impl ActuatorResult {
    pub fn ok(detail: impl Into<String>) -> Self {
        ActuatorResult { status: AckStatus::Ok, detail: detail.into() }
    }

    pub fn error(detail: impl Into<String>) -> Self {
        ActuatorResult { status: AckStatus::Error, detail: detail.into() }
    }

    pub fn is_ok(&self) -> bool {
        self.status == AckStatus::Ok
    }

    pub fn to_csv_line(&self) -> String {
        csv_row(&[self.status.as_str(), &self.detail])
    }

    pub fn parse(body: &str) -> Option<Self> {
        let line = body.lines().next()?;
        let (status, detail) = line.split_once(',').unwrap_or((line, ""));
        let status = match status {
            "OK" => AckStatus::Ok,
            "ERROR" => AckStatus::Error,
            _ => return None,
        };
        let detail = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(detail.as_bytes())
            .records()
            .next()
            .and_then(Result::ok)
            .and_then(|r| r.get(0).map(str::to_owned))
            .unwrap_or_default();
        Some(ActuatorResult { status, detail })
    }
}

fn csv_row(fields: &[&str]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 in, utf8 out")
}

/// One audit record: `timestamp_ms,actuator,args,status,detail`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub timestamp_ms: u64,
    pub actuator: String,
    pub args: String,
    pub status: AckStatus,
    pub detail: String,
}

/// Append-only record of every actuator invocation on a node.
pub struct Ledger {
    now: NowFn,
    rows: Mutex<Vec<LedgerRow>>,
    file: Option<Mutex<csv::Writer<File>>>,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger").field("rows", &self.rows.lock().unwrap().len()).finish()
    }
}

impl Ledger {
    pub fn in_memory(now: NowFn) -> Self {
        Ledger { now, rows: Mutex::new(Vec::new()), file: None }
    }

    /// Also appends each row to `path`, writing the header if the file is new.
    pub fn with_file(now: NowFn, path: &Path) -> std::io::Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
        if fresh {
            w.write_record(["timestamp_ms", "actuator", "args", "status", "detail"])?;
            w.flush()?;
        }
        Ok(Ledger { now, rows: Mutex::new(Vec::new()), file: Some(Mutex::new(w)) })
    }

    pub fn record(&self, actuator: &str, args: &str, result: &ActuatorResult) {
        let row = LedgerRow {
            timestamp_ms: (self.now)(),
            actuator: actuator.to_owned(),
            args: args.to_owned(),
            status: result.status,
            detail: result.detail.clone(),
        };
        if let Some(f) = &self.file {
            let mut w = f.lock().unwrap();
            let ts = row.timestamp_ms.to_string();
            let res = w
                .write_record([ts.as_str(), &row.actuator, &row.args, row.status.as_str(), &row.detail])
                .and_then(|_| w.flush().map_err(csv::Error::from));
            if let Err(e) = res {
                log::warn!("ledger write failed: {e}");
            }
        }
        self.rows.lock().unwrap().push(row);
    }

    pub fn rows(&self) -> Vec<LedgerRow> {
        self.rows.lock().unwrap().clone()
    }

    /// Rebuilds the set of running instances from acknowledged start/kill
    /// records alone.
    pub fn replay_census(rows: &[LedgerRow]) -> BTreeSet<u64> {
        let mut live = BTreeSet::new();
        for r in rows.iter().filter(|r| r.status == AckStatus::Ok) {
            let ids = r.detail.split_once(' ').map(|(_, ids)| ids).unwrap_or("");
            let ids = ids.split_whitespace().filter_map(|s| s.parse::<u64>().ok());
            match r.actuator.as_str() {
                "start" => live.extend(ids),
                "kill" => {
                    for id in ids {
                        live.remove(&id);
                    }
                }
                _ => {}
            }
        }
        live
    }
}

/// Starts and stops application instances. Real mode runs child processes;
/// simulations use virtual instances.
pub trait ProcessManager: Send {
    fn start(&mut self) -> Result<u64, String>;
    fn kill(&mut self, id: u64) -> Result<(), String>;
    /// Restarts an instance under the same id.
    fn reboot(&mut self, id: u64) -> Result<(), String>;
    fn census(&self) -> Vec<u64>;
}

pub type SharedProcesses = Arc<Mutex<dyn ProcessManager>>;

#[derive(Debug, Default)]
pub struct VirtualProcesses {
    next: u64,
    running: BTreeSet<u64>,
    restarts: BTreeMap<u64, u32>,
}

impl VirtualProcesses {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn restarts(&self, id: u64) -> u32 {
        self.restarts.get(&id).copied().unwrap_or(0)
    }
}

impl ProcessManager for VirtualProcesses {
    fn start(&mut self) -> Result<u64, String> {
        self.next += 1;
        self.running.insert(self.next);
        Ok(self.next)
    }

    fn kill(&mut self, id: u64) -> Result<(), String> {
        if self.running.remove(&id) {
            Ok(())
        } else if id >= 1 && id <= self.next {
            Err(format!("instance {id} already dead"))
        } else {
            Err(format!("unknown instance {id}"))
        }
    }

    fn reboot(&mut self, id: u64) -> Result<(), String> {
        if !self.running.contains(&id) {
            return Err(format!("instance {id} not running"));
        }
        *self.restarts.entry(id).or_insert(0) += 1;
        Ok(())
    }

    fn census(&self) -> Vec<u64> {
        self.running.iter().copied().collect()
    }
}

/// Local child processes running `command`.
#[derive(Debug)]
pub struct ChildProcesses {
    command: Vec<String>,
    next: u64,
    children: BTreeMap<u64, Child>,
}

impl ChildProcesses {
    pub fn new(command: Vec<String>) -> Result<Self, String> {
        if command.is_empty() {
            return Err("empty application command".into());
        }
        Ok(ChildProcesses { command, next: 0, children: BTreeMap::new() })
    }

    fn spawn(&self) -> Result<Child, String> {
        Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", self.command[0]))
    }

    fn reap(&mut self) {
        self.children.retain(|_, c| matches!(c.try_wait(), Ok(None)));
    }
}

impl ProcessManager for ChildProcesses {
    fn start(&mut self) -> Result<u64, String> {
        let child = self.spawn()?;
        self.next += 1;
        self.children.insert(self.next, child);
        Ok(self.next)
    }

    fn kill(&mut self, id: u64) -> Result<(), String> {
        self.reap();
        let Some(mut c) = self.children.remove(&id) else {
            return Err(if id >= 1 && id <= self.next {
                format!("instance {id} already dead")
            } else {
                format!("unknown instance {id}")
            });
        };
        c.kill().map_err(|e| e.to_string())?;
        let _ = c.wait();
        Ok(())
    }

    fn reboot(&mut self, id: u64) -> Result<(), String> {
        self.kill(id)?;
        let child = self.spawn()?;
        self.children.insert(id, child);
        Ok(())
    }

    fn census(&self) -> Vec<u64> {
        self.children.keys().copied().collect()
    }
}

impl Drop for ChildProcesses {
    fn drop(&mut self) {
        for c in self.children.values_mut() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn args_string(req: &SensorRequest) -> String {
    req.args.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("&")
}

fn ack(ledger: &Ledger, name: &str, req: &SensorRequest, result: ActuatorResult) -> Reply {
    ledger.record(name, &args_string(req), &result);
    Reply::Rows(format!("{}\n", result.to_csv_line().trim_end()))
}

fn id_list(ids: &[u64]) -> String {
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

/// `/start?count=N`: starts N instances (default 1).
pub struct StartActuator {
    pub processes: SharedProcesses,
    pub ledger: Arc<Ledger>,
}

impl Handler for StartActuator {
    fn handle(&self, req: &SensorRequest) -> Reply {
        let count = match req.arg("count").map(str::parse::<u64>) {
            None => Ok(1),
            Some(Ok(n)) if n >= 1 => Ok(n),
            Some(_) => Err(format!("count must be a positive integer, got {:?}", req.arg("count").unwrap())),
        };
        let result = match count {
            Err(e) => ActuatorResult::error(e),
            Ok(n) => {
                let mut pm = self.processes.lock().unwrap();
                let mut ids = Vec::new();
                let mut failure = None;
                for _ in 0..n {
                    match pm.start() {
                        Ok(id) => ids.push(id),
                        Err(e) => {
                            failure = Some(e);
                            break;
                        }
                    }
                }
                match failure {
                    None => ActuatorResult::ok(format!("started {}", id_list(&ids))),
                    Some(e) => {
                        // roll back so the ack matches the census
                        for id in &ids {
                            let _ = pm.kill(*id);
                        }
                        ActuatorResult::error(e)
                    }
                }
            }
        };
        ack(&self.ledger, "start", req, result)
    }
}

fn target(req: &SensorRequest) -> Result<u64, String> {
    let t = req.arg("target").ok_or("missing target")?;
    t.parse().map_err(|_| format!("bad target {t:?}"))
}

/// `/kill?target=ID`.
pub struct KillActuator {
    pub processes: SharedProcesses,
    pub ledger: Arc<Ledger>,
}

impl Handler for KillActuator {
    fn handle(&self, req: &SensorRequest) -> Reply {
        let result = match target(req).and_then(|id| self.processes.lock().unwrap().kill(id).map(|_| id)) {
            Ok(id) => ActuatorResult::ok(format!("killed {id}")),
            Err(e) => ActuatorResult::error(e),
        };
        ack(&self.ledger, "kill", req, result)
    }
}

/// `/reboot[?target=ID]`: restarts one instance, or every instance on the
/// node when no target is given.
pub struct RebootActuator {
    pub processes: SharedProcesses,
    pub ledger: Arc<Ledger>,
}

impl Handler for RebootActuator {
    fn handle(&self, req: &SensorRequest) -> Reply {
        let mut pm = self.processes.lock().unwrap();
        let result = if req.arg("target").is_some() {
            match target(req).and_then(|id| pm.reboot(id).map(|_| id)) {
                Ok(id) => ActuatorResult::ok(format!("rebooted {id}")),
                Err(e) => ActuatorResult::error(e),
            }
        } else {
            let ids = pm.census();
            match ids.iter().try_for_each(|id| pm.reboot(*id)) {
                Ok(()) => ActuatorResult::ok(format!("rebooted {}", id_list(&ids)).trim_end().to_owned()),
                Err(e) => ActuatorResult::error(e),
            }
        };
        drop(pm);
        ack(&self.ledger, "reboot", req, result)
    }
}

/// Live-tunable knobs of the synthetic lookup application.
#[derive(Debug)]
pub struct AppKnobs {
    drop_fraction: Mutex<f64>,
    lookup_period_ms: AtomicU64,
}

impl AppKnobs {
    pub fn new(drop_fraction: f64, lookup_period_ms: u64) -> Self {
        AppKnobs { drop_fraction: Mutex::new(drop_fraction), lookup_period_ms: AtomicU64::new(lookup_period_ms) }
    }

    pub fn drop_fraction(&self) -> f64 {
        *self.drop_fraction.lock().unwrap()
    }

    pub fn lookup_period_ms(&self) -> u64 {
        self.lookup_period_ms.load(Ordering::Relaxed)
    }

    pub fn set_drop_fraction(&self, f: f64) -> Result<(), String> {
        if !(0.0..=1.0).contains(&f) {
            return Err(format!("fraction {f} not in [0, 1]"));
        }
        *self.drop_fraction.lock().unwrap() = f;
        Ok(())
    }

    pub fn set_lookup_period_ms(&self, p: u64) -> Result<(), String> {
        if p == 0 {
            return Err("period_ms must be positive".into());
        }
        self.lookup_period_ms.store(p, Ordering::Relaxed);
        Ok(())
    }
}

/// `/setloss?fraction=F`.
pub struct SetLossActuator {
    pub knobs: Arc<AppKnobs>,
    pub ledger: Arc<Ledger>,
}

impl Handler for SetLossActuator {
    fn handle(&self, req: &SensorRequest) -> Reply {
        let parsed = req
            .arg("fraction")
            .ok_or_else(|| "missing fraction".to_owned())
            .and_then(|s| s.parse::<f64>().map_err(|_| format!("bad fraction {s:?}")));
        let result = match parsed.and_then(|f| self.knobs.set_drop_fraction(f).map(|_| f)) {
            Ok(f) => ActuatorResult::ok(format!("drop fraction {f}")),
            Err(e) => ActuatorResult::error(e),
        };
        ack(&self.ledger, "setloss", req, result)
    }
}

/// `/setworkload?period_ms=P`.
pub struct SetWorkloadActuator {
    pub knobs: Arc<AppKnobs>,
    pub ledger: Arc<Ledger>,
}

impl Handler for SetWorkloadActuator {
    fn handle(&self, req: &SensorRequest) -> Reply {
        let parsed = req
            .arg("period_ms")
            .ok_or_else(|| "missing period_ms".to_owned())
            .and_then(|s| s.parse::<u64>().map_err(|_| format!("bad period_ms {s:?}")));
        let result = match parsed.and_then(|p| self.knobs.set_lookup_period_ms(p).map(|_| p)) {
            Ok(p) => ActuatorResult::ok(format!("lookup period {p} ms")),
            Err(e) => ActuatorResult::error(e),
        };
        ack(&self.ledger, "setworkload", req, result)
    }
}
