use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{Reply, SensactError, SensorServer};

/// A running sensor server. Dropping it stops the worker threads.
pub struct HttpServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl HttpServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServerHandle {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

/// Serves `server` over HTTP on `addr` (use port 0 for an ephemeral port)
/// with `threads` concurrent request workers.
pub fn serve_http(server: Arc<SensorServer>, addr: &str, threads: usize) -> io::Result<HttpServerHandle> {
    let http = Arc::new(tiny_http::Server::http(addr).map_err(|e| io::Error::other(e.to_string()))?);
    let local = http
        .server_addr()
        .to_ip()
        .ok_or_else(|| io::Error::other("server bound to a non-IP address"))?;
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..threads.max(1))
        .map(|_| {
            let http = http.clone();
            let server = server.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match http.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(req)) => respond(&server, req),
                        Ok(None) => {}
                        Err(e) => {
                            log::warn!("http accept failed: {e}");
                            break;
                        }
                    }
                }
            })
        })
        .collect();
    Ok(HttpServerHandle { addr: local, stop, workers })
}

fn respond(server: &SensorServer, req: tiny_http::Request) {
    let resp = server.serve_sensor_request(req.url());
    let header = tiny_http::Header::from_bytes("Content-Type", "text/plain").expect("static header");
    let status = tiny_http::StatusCode(resp.status);
    let result = match resp.body {
        Reply::Rows(s) | Reply::Failed(s) | Reply::BadRequest(s) => {
            req.respond(tiny_http::Response::from_string(s).with_status_code(status).with_header(header))
        }
        Reply::Stream(reader) => write_stream(req.into_writer(), status.0, reader),
    };
    if let Err(e) = result {
        log::debug!("client went away: {e}");
    }
}

/// Writes a chunked body one chunk per read, flushing each, so streamed
/// results reach the client as they are produced rather than when a
/// buffer fills.
fn write_stream(mut w: Box<dyn io::Write + Send>, status: u16, mut reader: Box<dyn Read + Send>) -> io::Result<()> {
    let reason = if status == 200 { "OK" } else { "Error" };
    write!(
        w,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: text/plain\r\nTransfer-Encoding: chunked\r\nConnection: close\r\n\r\n"
    )?;
    w.flush()?;
    let mut buf = [0u8; 8192];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            w.write_all(b"0\r\n\r\n")?;
            return w.flush();
        }
        write!(w, "{n:x}\r\n")?;
        w.write_all(&buf[..n])?;
        w.write_all(b"\r\n")?;
        w.flush()?;
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout_connect(timeout).timeout(timeout).build()
}

/// GETs `url` and returns the body of a 200 response.
pub fn http_get(url: &str, timeout: Duration) -> Result<String, SensactError> {
    match agent(timeout).get(url).call() {
        Ok(resp) => {
            let mut body = String::new();
            resp.into_reader()
                .read_to_string(&mut body)
                .map_err(|e| SensactError::Connect { url: url.to_owned(), reason: e.to_string() })?;
            Ok(body)
        }
        Err(ureq::Error::Status(status, resp)) => Err(SensactError::Status {
            url: url.to_owned(),
            status,
            body: resp.into_string().unwrap_or_default(),
        }),
        Err(e) => Err(SensactError::Connect { url: url.to_owned(), reason: e.to_string() }),
    }
}

/// Opens a streaming GET; the reader yields the body as it arrives.
pub fn http_stream(url: &str, connect_timeout: Duration) -> Result<Box<dyn Read + Send>, SensactError> {
    let agent = ureq::AgentBuilder::new().timeout_connect(connect_timeout).build();
    match agent.get(url).call() {
        Ok(resp) => Ok(Box::new(resp.into_reader())),
        Err(ureq::Error::Status(status, resp)) => Err(SensactError::Status {
            url: url.to_owned(),
            status,
            body: resp.into_string().unwrap_or_default(),
        }),
        Err(e) => Err(SensactError::Connect { url: url.to_owned(), reason: e.to_string() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensact::{Counters, HostnameSensor};

    #[test]
    fn serves_over_loopback() {
        let mut s = SensorServer::new();
        s.register("hostname", Arc::new(HostnameSensor::new("node-7"))).unwrap();
        let counters = Counters::new();
        s.register("msgcount", counters.sensor("msgcount")).unwrap();
        let h = serve_http(Arc::new(s), "127.0.0.1:0", 2).unwrap();
        let base = format!("http://{}", h.addr());
        let t = Duration::from_secs(2);
        assert_eq!(http_get(&format!("{base}/hostname"), t).unwrap(), "node-7\n");
        let before: u64 = http_get(&format!("{base}/msgcount"), t).unwrap().trim().parse().unwrap();
        counters.incr("msgcount", 5);
        let after: u64 = http_get(&format!("{base}/msgcount"), t).unwrap().trim().parse().unwrap();
        assert!(after >= before + 5);
        match http_get(&format!("{base}/nothing"), t) {
            Err(SensactError::Status { status: 404, .. }) => {}
            other => panic!("{other:?}"),
        }
        h.shutdown();
        assert!(matches!(http_get(&format!("{base}/hostname"), t), Err(SensactError::Connect { .. })));
    }

    #[test]
    fn streams_are_chunked_through() {
        let mut s = SensorServer::new();
        s.register(
            "stream",
            Arc::new(StreamHandler),
        )
        .unwrap();
        let h = serve_http(Arc::new(s), "127.0.0.1:0", 1).unwrap();
        let mut r = http_stream(&format!("http://{}/stream", h.addr()), Duration::from_secs(2)).unwrap();
        let mut body = String::new();
        r.read_to_string(&mut body).unwrap();
        assert_eq!(body, "a,1,2\n\nb,2,3\n\n");
    }

    struct StreamHandler;

    impl crate::sensact::Handler for StreamHandler {
        fn handle(&self, _req: &crate::sensact::SensorRequest) -> Reply {
            Reply::Stream(Box::new(io::Cursor::new(b"a,1,2\n\nb,2,3\n\n".to_vec())))
        }
    }
}
