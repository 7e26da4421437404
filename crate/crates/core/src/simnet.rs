//! Deterministic discrete-event engine primitives: the event queue, the
//! per-pair delay model, per-node uplink FIFO accounting, and seeded RNG
//! streams, one per concern.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::types::{DataKind, NodeId, PropId};

/// Capacity parameters of one simulated node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProfile {
    pub id: NodeId,
    /// Bytes per second.
    pub upload_bw: f64,
    /// Agent window length in seconds.
    pub w: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Message {
    Header {
        prop: PropId,
        origin: NodeId,
        kind: DataKind,
        total_size: u64,
    },
    Part {
        prop: PropId,
        index: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    Delivery {
        from: NodeId,
        to: NodeId,
        msg: Message,
    },
    /// The node's uplink became free; send the next queued candidate.
    UplinkSlot {
        node: NodeId,
    },
    AgentWakeup {
        node: NodeId,
    },
    Publish {
        node: NodeId,
        size: u64,
        kind: DataKind,
    },
    /// Deferred ledger application when visibility_delay > 0.
    LedgerApply {
        a: NodeId,
        b: NodeId,
        /// Peer terminated in the same breath, for the replace flow.
        replace: Option<NodeId>,
    },
}

#[derive(Debug)]
struct Queued {
    time: f64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap, we pop the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Event queue popping in (time, insertion sequence) order. Identical
/// schedules yield identical pop orders.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    seq: u64,
    pub scheduled: u64,
    pub processed: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule(&mut self, time: f64, ev: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.scheduled += 1;
        self.heap.push(Queued { time, seq, ev });
    }

    pub fn pop(&mut self) -> Option<(f64, Event)> {
        self.heap.pop().map(|q| {
            self.processed += 1;
            (q.time, q.ev)
        })
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|q| q.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a named child seed from the master seed.
pub fn stream_seed(master: u64, label: &str) -> u64 {
    let mut h = splitmix64(master);
    for &b in label.as_bytes() {
        h = splitmix64(h ^ b as u64);
    }
    h
}

pub fn stream_rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, label))
}

/// Symmetric per-pair link delay, a pure function of the delay seed and
/// the unordered pair, so mirror networks share identical values without
/// any draw-order coupling.
pub fn pair_delay(delay_seed: u64, a: NodeId, b: NodeId, delay_min: f64, delay_max: f64) -> f64 {
    let (lo, hi) = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
    let h = splitmix64(delay_seed ^ splitmix64(((lo as u64) << 32) | hi as u64));
    let unit = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    delay_min + unit * (delay_max - delay_min)
}

/// Per-node uplink FIFO: a message occupies the uplink for size/bw
/// seconds starting when the uplink is free; it arrives after the link
/// delay on top. The download side is unconstrained.
#[derive(Debug, Clone)]
pub struct Uplink {
    pub free_at: f64,
    pub bytes_sent: u64,
    pub slot_scheduled: bool,
}

impl Uplink {
    pub fn new() -> Self {
        Uplink {
            free_at: 0.0,
            bytes_sent: 0,
            slot_scheduled: false,
        }
    }

    /// Occupy the uplink for one message; returns (send_done, arrival).
    pub fn transmit(&mut self, now: f64, size: u64, bw: f64, link_delay: f64) -> (f64, f64) {
        let start = self.free_at.max(now);
        let done = start + size as f64 / bw;
        self.free_at = done;
        self.bytes_sent += size;
        (done, done + link_delay)
    }

    /// Queue backlog in seconds as seen at `now`.
    pub fn backlog(&self, now: f64) -> f64 {
        (self.free_at - now).max(0.0)
    }
}

impl Default for Uplink {
    fn default() -> Self {
        Self::new()
    }
}

/// Simulated 1 MB-equivalent fetch time from `b`, through `b`'s uplink
/// model: current backlog + link delay + 1,000,000 / bw_b.
pub fn probe_fetch_time(link_delay: f64, bw_b: f64, backlog_b: f64) -> f64 {
    backlog_b + link_delay + 1_000_000.0 / bw_b
}
