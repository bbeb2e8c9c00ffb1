use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use super::topology::{Hop, Nanos, Routes, SimTopology};

struct Entry<E> {
    at: Nanos,
    seq: u64,
    ev: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // min-heap on (time, insertion order)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Virtual-time event queue. Events run in time order, ties in insertion
/// order; nothing can be scheduled in the past.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    now: Nanos,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), seq: 0, now: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Schedules `ev` at `at`, or at the current time if `at` has passed.
    pub fn push(&mut self, at: Nanos, ev: E) {
        let at = at.max(self.now);
        self.heap.push(Entry { at, seq: self.seq, ev });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(Nanos, E)> {
        let e = self.heap.pop()?;
        debug_assert!(e.at >= self.now);
        self.now = e.at;
        Some((e.at, e.ev))
    }

    /// Pops the next event only if it is due no later than `limit`.
    pub fn pop_until(&mut self, limit: Nanos) -> Option<(Nanos, E)> {
        if self.heap.peek()?.at > limit {
            return None;
        }
        self.pop()
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.heap.peek().map(|e| e.at)
    }

    /// Moves the clock forward without running anything.
    pub fn advance_to(&mut self, t: Nanos) {
        debug_assert!(self.peek_time().is_none_or(|p| p >= t));
        self.now = self.now.max(t);
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    /// Bytes summed over every link traversal.
    pub link_bytes: u64,
    pub traversals: u64,
}

/// Store-and-forward links with one FIFO queue per direction.
#[derive(Debug)]
pub struct Network {
    routes: Routes,
    busy_until: Vec<[Nanos; 2]>,
    pub stats: LinkStats,
}

impl Network {
    pub fn new(topo: Arc<SimTopology>) -> Self {
        let links = topo.links.len();
        Network { routes: Routes::new(topo), busy_until: vec![[0; 2]; links], stats: LinkStats::default() }
    }

    pub fn routes(&mut self) -> &mut Routes {
        &mut self.routes
    }

    pub fn topology(&self) -> &Arc<SimTopology> {
        self.routes.topology()
    }

    /// Puts `size` bytes on `hop` at `now`: waits for the queue ahead, then
    /// for the transmission, then for propagation. Returns the arrival time
    /// at the far end.
    pub fn transmit(&mut self, now: Nanos, hop: Hop, size: u64) -> Nanos {
        let link = &self.routes.topology().links[hop.link];
        let service = link.service_ns(size);
        let latency = link.latency_ns;
        let busy = &mut self.busy_until[hop.link][hop.dir as usize];
        let start = now.max(*busy);
        *busy = start + service;
        self.stats.link_bytes += size;
        self.stats.traversals += 1;
        start + service + latency
    }

    pub fn path(&mut self, from_router: usize, to_router: usize) -> Arc<[Hop]> {
        self.routes.path(from_router, to_router)
    }
}
