use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use super::{Handler, Reply, SensorRequest};

/// `/hostname`: one row with the node's name.
#[derive(Debug, Clone)]
pub struct HostnameSensor {
    name: String,
}

impl HostnameSensor {
    pub fn new(name: impl Into<String>) -> Self {
        HostnameSensor { name: name.into() }
    }
}

impl Handler for HostnameSensor {
    fn handle(&self, _req: &SensorRequest) -> Reply {
        Reply::Rows(format!("{}\n", self.name))
    }
}

/// Where a load sensor gets its number.
#[derive(Debug, Clone)]
pub enum LoadSource {
    /// A value set by a scenario or test.
    Scripted(Arc<Mutex<f64>>),
    /// The 1-minute load average from `/proc/loadavg`.
    System,
    /// The first number in a file, re-read on every request.
    File(PathBuf),
}

/// `/load`: one row with the 1-minute load average.
#[derive(Debug, Clone)]
pub struct LoadSensor {
    source: LoadSource,
}

impl LoadSensor {
    pub fn scripted(initial: f64) -> Self {
        LoadSensor { source: LoadSource::Scripted(Arc::new(Mutex::new(initial.max(0.0)))) }
    }

    pub fn system() -> Self {
        LoadSensor { source: LoadSource::System }
    }

    pub fn from_file(path: impl Into<PathBuf>) -> Self {
        LoadSensor { source: LoadSource::File(path.into()) }
    }

    /// Overrides the reported value; turns a system sensor into a scripted one.
    pub fn set(&mut self, v: f64) {
        match &self.source {
            LoadSource::Scripted(cell) => *cell.lock().unwrap() = v.max(0.0),
            _ => self.source = LoadSource::Scripted(Arc::new(Mutex::new(v.max(0.0)))),
        }
    }

    /// A handle that changes the value seen by every clone of this sensor.
    pub fn shared_value(&self) -> Option<Arc<Mutex<f64>>> {
        match &self.source {
            LoadSource::Scripted(cell) => Some(cell.clone()),
            _ => None,
        }
    }

    pub fn read(&self) -> Result<f64, String> {
        match &self.source {
            LoadSource::Scripted(cell) => Ok(*cell.lock().unwrap()),
            LoadSource::System => {
                let s = std::fs::read_to_string("/proc/loadavg").map_err(|e| e.to_string())?;
                s.split_whitespace()
                    .next()
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| format!("unreadable loadavg {s:?}"))
            }
            LoadSource::File(p) => {
                let s = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                s.split_whitespace()
                    .next()
                    .and_then(|f| f.parse::<f64>().ok())
                    .map(|v| v.max(0.0))
                    .ok_or_else(|| format!("{}: no number in {s:?}", p.display()))
            }
        }
    }
}

impl Handler for LoadSensor {
    fn handle(&self, _req: &SensorRequest) -> Reply {
        self.read().map(|v| format!("{v}\n")).into()
    }
}

/// Named monotone counters shared between an application and its sensors.
#[derive(Debug, Clone, Default)]
pub struct Counters {
    inner: Arc<Mutex<BTreeMap<String, u64>>>,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn incr(&self, name: &str, by: u64) {
        *self.inner.lock().unwrap().entry(name.to_owned()).or_insert(0) += by;
    }

    pub fn get(&self, name: &str) -> u64 {
        self.inner.lock().unwrap().get(name).copied().unwrap_or(0)
    }

    /// A sensor reporting one counter, e.g. `/msgcount`.
    pub fn sensor(&self, name: &str) -> Arc<dyn Handler> {
        let counters = self.clone();
        let name = name.to_owned();
        Arc::new(move |_: &SensorRequest| Ok(format!("{}\n", counters.get(&name))))
    }
}

/// `/counter?name=X`: any counter by name; unknown names read as 0.
impl Handler for Counters {
    fn handle(&self, req: &SensorRequest) -> Reply {
        match req.arg("name") {
            Some(n) => Reply::Rows(format!("{}\n", self.get(n))),
            None => Reply::BadRequest("missing `name`".into()),
        }
    }
}

/// `/logreader?reader=R`: the complete lines appended to a file since reader
/// `R` last asked. A partial last line is held back until its newline lands.
#[derive(Debug)]
pub struct LogReaderSensor {
    path: PathBuf,
    cursors: Mutex<HashMap<String, u64>>,
}

impl LogReaderSensor {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        LogReaderSensor { path: path.into(), cursors: Mutex::new(HashMap::new()) }
    }

    pub fn read_new(&self, reader: &str) -> Result<String, String> {
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(reader.to_owned()).or_insert(0);
        let mut f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(String::new()),
            Err(e) => return Err(e.to_string()),
        };
        let len = f.metadata().map_err(|e| e.to_string())?.len();
        if len < *cursor {
            // truncated or rotated
            *cursor = 0;
        }
        f.seek(SeekFrom::Start(*cursor)).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| e.to_string())?;
        let Some(end) = buf.iter().rposition(|b| *b == b'\n') else {
            return Ok(String::new());
        };
        buf.truncate(end + 1);
        *cursor += buf.len() as u64;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }
}

impl Handler for LogReaderSensor {
    fn handle(&self, req: &SensorRequest) -> Reply {
        self.read_new(req.arg("reader").unwrap_or("default")).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn req(s: &str) -> SensorRequest {
        SensorRequest::parse(s).unwrap()
    }

    fn rows(r: Reply) -> String {
        match r {
            Reply::Rows(s) => s,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn counter_starts_at_zero_and_grows() {
        let c = Counters::new();
        let s = c.sensor("msgcount");
        assert_eq!(rows(s.handle(&req("/msgcount"))), "0\n");
        c.incr("msgcount", 3);
        assert_eq!(rows(s.handle(&req("/msgcount"))), "3\n");
        assert_eq!(rows(c.handle(&req("/counter?name=msgcount"))), "3\n");
    }

    #[test]
    fn load_is_scriptable_and_non_negative() {
        let mut l = LoadSensor::scripted(1.5);
        assert_eq!(rows(l.handle(&req("/load"))), "1.5\n");
        l.set(-2.0);
        assert_eq!(l.read().unwrap(), 0.0);
        let sys = LoadSensor::system();
        if let Ok(v) = sys.read() {
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn file_load_follows_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("load");
        let l = LoadSensor::from_file(&p);
        assert!(l.read().is_err());
        std::fs::write(&p, "7.25\n").unwrap();
        assert_eq!(l.read().unwrap(), 7.25);
        std::fs::write(&p, "0.5 trailing").unwrap();
        assert_eq!(l.read().unwrap(), 0.5);
    }

    #[test]
    fn logreader_emits_each_complete_line_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("app.log");
        let s = LogReaderSensor::new(&path);
        assert_eq!(s.read_new("a").unwrap(), "");
        let mut f = File::create(&path).unwrap();
        assert_eq!(s.read_new("a").unwrap(), "");
        write!(f, "one\ntwo\nthr").unwrap();
        assert_eq!(s.read_new("a").unwrap(), "one\ntwo\n");
        writeln!(f, "ee").unwrap();
        assert_eq!(s.read_new("a").unwrap(), "three\n");
        assert_eq!(s.read_new("a").unwrap(), "");
        // other readers keep their own cursor
        assert_eq!(s.read_new("b").unwrap(), "one\ntwo\nthree\n");
    }
}
