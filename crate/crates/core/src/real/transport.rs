use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::qtree::{Frame, NodeId};

const CONNECT_TIMEOUT: Duration = Duration::from_millis(1000);

/// Outbound side: one persistent connection per peer, each fed by its own
/// writer thread so a slow peer never stalls the node loop. Frames to an
/// unreachable peer are dropped; ISING deadlines cover the loss.
pub struct Peers {
    addrs: HashMap<NodeId, SocketAddr>,
    writers: HashMap<NodeId, Sender<Frame>>,
}

impl Peers {
    pub fn new(addrs: HashMap<NodeId, SocketAddr>) -> Self {
        Peers { addrs, writers: HashMap::new() }
    }

    pub fn send(&mut self, to: &NodeId, frame: Frame) {
        if !self.writers.contains_key(to) {
            let Some(&addr) = self.addrs.get(to) else {
                log::warn!("no address for peer {to}");
                return;
            };
            let (tx, rx) = mpsc::channel();
            std::thread::Builder::new()
                .name(format!("peer-{addr}"))
                .spawn(move || writer(addr, rx))
                .expect("spawn peer writer");
            self.writers.insert(to.clone(), tx);
        }
        let _ = self.writers[to].send(frame);
    }
}

fn writer(addr: SocketAddr, rx: Receiver<Frame>) {
    let mut conn: Option<BufWriter<TcpStream>> = None;
    for frame in rx {
        if conn.is_none() {
            match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    conn = Some(BufWriter::new(s));
                }
                Err(e) => {
                    log::debug!("connect {addr}: {e}; dropping frame");
                    continue;
                }
            }
        }
        if let Err(e) = frame.write_to(conn.as_mut().unwrap()) {
            log::debug!("send to {addr}: {e}");
            conn = None;
        }
    }
}

/// Inbound side: accepts peer connections and hands every decoded frame to
/// `deliver`.
pub struct FrameListener {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl FrameListener {
    pub fn bind<F>(addr: SocketAddr, deliver: F) -> std::io::Result<FrameListener>
    where
        F: Fn(Frame) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let deliver = Arc::new(deliver);
        let flag = stop.clone();
        let accept = std::thread::Builder::new().name(format!("accept-{addr}")).spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let deliver = deliver.clone();
                let flag = flag.clone();
                std::thread::spawn(move || {
                    let mut r = BufReader::new(conn);
                    while !flag.load(Ordering::SeqCst) {
                        match Frame::read_from(&mut r) {
                            Ok(Some(f)) => deliver(f),
                            Ok(None) => break,
                            Err(e) => {
                                log::debug!("bad inbound frame: {e}");
                                break;
                            }
                        }
                    }
                });
            }
        })?;
        Ok(FrameListener { addr, stop, accept: Some(accept) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for FrameListener {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}
