//! HTTP sensors and actuators.
//!
//! A sensor server maps a path name to a handler. Requests are plain HTTP
//! GETs, `/<name>?arg=value&...`, and responses are `text/plain` CSV rows.
//! Actuators use the same convention and answer with a one-row
//! acknowledgement, `OK,<detail>` or `ERROR,<detail>`.

mod actuators;
mod http;
mod sensors;

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::Arc;

use thiserror::Error;

pub use actuators::{
    AckStatus, ActuatorResult, AppKnobs, ChildProcesses, KillActuator, Ledger, LedgerRow, ProcessManager,
    RebootActuator, SetLossActuator, SetWorkloadActuator, SharedProcesses, StartActuator, VirtualProcesses,
};
pub use http::{http_get, http_stream, serve_http, HttpServerHandle};
pub use sensors::{Counters, HostnameSensor, LoadSensor, LoadSource, LogReaderSensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensactError {
    #[error("sensor `{0}` already registered")]
    Duplicate(String),
    #[error("bad request url: {0}")]
    BadUrl(String),
    #[error("connection to {url} failed: {reason}")]
    Connect { url: String, reason: String },
    #[error("{url} answered {status}: {body}")]
    Status { url: String, status: u16, body: String },
}

/// A parsed sensor or actuator request.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRequest {
    pub name: String,
    pub args: BTreeMap<String, String>,
    /// Path and query as received, for handlers with their own grammar.
    pub raw: String,
}

impl SensorRequest {
    pub fn parse(path_and_query: &str) -> Result<Self, SensactError> {
        let u = url::Url::parse("http://sensor.invalid")
            .and_then(|base| base.join(path_and_query))
            .map_err(|e| SensactError::BadUrl(format!("{path_and_query}: {e}")))?;
        let name = u.path().trim_start_matches('/').to_owned();
        let args = u.query_pairs().map(|(k, v)| (k.into_owned(), v.into_owned())).collect();
        Ok(SensorRequest { name, args, raw: path_and_query.to_owned() })
    }

    pub fn arg(&self, key: &str) -> Option<&str> {
        self.args.get(key).map(String::as_str)
    }
}

/// Handler output.
pub enum Reply {
    /// CSV rows.
    Rows(String),
    /// The handler failed; maps to HTTP 500.
    Failed(String),
    /// The request itself was malformed; maps to HTTP 400.
    BadRequest(String),
    /// A body produced incrementally, for continuous results.
    Stream(Box<dyn Read + Send>),
}

impl std::fmt::Debug for Reply {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reply::Rows(s) => f.debug_tuple("Rows").field(s).finish(),
            Reply::Failed(s) => f.debug_tuple("Failed").field(s).finish(),
            Reply::BadRequest(s) => f.debug_tuple("BadRequest").field(s).finish(),
            Reply::Stream(_) => f.write_str("Stream(..)"),
        }
    }
}

impl From<Result<String, String>> for Reply {
    fn from(r: Result<String, String>) -> Self {
        match r {
            Ok(s) => Reply::Rows(s),
            Err(e) => Reply::Failed(e),
        }
    }
}

/// A sensor or actuator. Handlers may be called concurrently.
pub trait Handler: Send + Sync {
    fn handle(&self, req: &SensorRequest) -> Reply;
}

impl<F> Handler for F
where
    F: Fn(&SensorRequest) -> Result<String, String> + Send + Sync,
{
    fn handle(&self, req: &SensorRequest) -> Reply {
        self(req).into()
    }
}

/// Plain response for a request: HTTP status plus body.
#[derive(Debug)]
pub struct SensorResponse {
    pub status: u16,
    pub body: Reply,
}

impl SensorResponse {
    /// Collects the body into a string, draining streams.
    pub fn into_text(self) -> String {
        match self.body {
            Reply::Rows(s) | Reply::Failed(s) | Reply::BadRequest(s) => s,
            Reply::Stream(mut r) => {
                let mut s = String::new();
                let _ = r.read_to_string(&mut s);
                s
            }
        }
    }
}

/// Named handlers reachable on one port.
#[derive(Default, Clone)]
pub struct SensorServer {
    handlers: BTreeMap<String, Arc<dyn Handler>>,
}

impl std::fmt::Debug for SensorServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.handlers.keys()).finish()
    }
}

impl SensorServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, handler: Arc<dyn Handler>) -> Result<(), SensactError> {
        if self.handlers.contains_key(name) {
            return Err(SensactError::Duplicate(name.to_owned()));
        }
        self.handlers.insert(name.to_owned(), handler);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.handlers.keys().map(String::as_str)
    }

    pub fn serve_sensor_request(&self, path_and_query: &str) -> SensorResponse {
        let req = match SensorRequest::parse(path_and_query) {
            Ok(r) => r,
            Err(e) => return SensorResponse { status: 400, body: Reply::BadRequest(e.to_string()) },
        };
        let Some(h) = self.handlers.get(&req.name) else {
            return SensorResponse { status: 404, body: Reply::Failed(format!("no sensor named `{}`", req.name)) };
        };
        let body = h.handle(&req);
        let status = match body {
            Reply::Rows(_) | Reply::Stream(_) => 200,
            Reply::Failed(_) => 500,
            Reply::BadRequest(_) => 400,
        };
        SensorResponse { status, body }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_parsing() {
        let r = SensorRequest::parse("/start?count=3&lifetime_ms=30000").unwrap();
        assert_eq!(r.name, "start");
        assert_eq!(r.arg("count"), Some("3"));
        assert_eq!(r.arg("missing"), None);
        let r = SensorRequest::parse("/hostname").unwrap();
        assert!(r.args.is_empty());
    }

    #[test]
    fn unknown_sensor_is_404_and_failure_is_500() {
        let mut s = SensorServer::new();
        s.register("hostname", Arc::new(HostnameSensor::new("n1"))).unwrap();
        s.register("broken", Arc::new(|_: &SensorRequest| Err::<String, _>("disk gone".to_owned())))
            .unwrap();
        let r = s.serve_sensor_request("/hostname");
        assert_eq!(r.status, 200);
        assert_eq!(r.into_text(), "n1\n");
        assert_eq!(s.serve_sensor_request("/nope").status, 404);
        let r = s.serve_sensor_request("/broken");
        assert_eq!(r.status, 500);
        assert!(r.into_text().contains("disk gone"));
    }

    #[test]
    fn names_are_unique() {
        let mut s = SensorServer::new();
        s.register("a", Arc::new(HostnameSensor::new("x"))).unwrap();
        assert!(matches!(s.register("a", Arc::new(HostnameSensor::new("y"))), Err(SensactError::Duplicate(_))));
    }
}
