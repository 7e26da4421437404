//! Chunked dissemination: splitting data into 500-byte parts, the
//! staggered per-moment part scheduler, and the per-node send/receive
//! state with first-heard accounting.

use std::collections::VecDeque;

use thiserror::Error;

use crate::types::NodeId;

/// Maximum size of one data part on the wire.
pub const PART_SIZE: u32 = 500;
/// Size of the propagation header (type byte plus opaque digest).
pub const HEADER_SIZE: u32 = 34;

#[derive(Debug, Error, PartialEq)]
pub enum DisseminationError {
    #[error("cannot propagate empty data")]
    EmptyData,
}

/// Split `total_size` bytes into parts of at most [`PART_SIZE`] bytes.
/// All parts except possibly the last are exactly 500 bytes.
pub fn split_data(total_size: u64) -> Result<Vec<u32>, DisseminationError> {
    if total_size == 0 {
        return Err(DisseminationError::EmptyData);
    }
    let full = (total_size / PART_SIZE as u64) as usize;
    let rem = (total_size % PART_SIZE as u64) as u32;
    let mut parts = vec![PART_SIZE; full];
    if rem > 0 {
        parts.push(rem);
    }
    Ok(parts)
}

pub fn part_count(total_size: u64) -> u32 {
    total_size.div_ceil(PART_SIZE as u64) as u32
}

pub fn part_size(total_size: u64, index: u32) -> u32 {
    let k = part_count(total_size);
    if index + 1 == k {
        let rem = (total_size % PART_SIZE as u64) as u32;
        if rem == 0 {
            PART_SIZE
        } else {
            rem
        }
    } else {
        PART_SIZE
    }
}

/// One scheduler round: the peer at position `i` is offered part
/// `(i + moment) mod parts` (0-indexed), skipping parts the peer is
/// already known to hold. After `parts` data moments every peer has been
/// offered every part.
pub fn schedule_moment<H>(
    parts: u32,
    peers: &[NodeId],
    moment: u32,
    already_has: H,
) -> Vec<(NodeId, u32)>
where
    H: Fn(usize, u32) -> bool,
{
    if parts == 0 {
        return Vec::new();
    }
    peers
        .iter()
        .enumerate()
        .filter_map(|(i, &peer)| {
            let part = (i as u32 + moment) % parts;
            if already_has(i, part) {
                None
            } else {
                Some((peer, part))
            }
        })
        .collect()
}

/// Dense part-index set sized for one propagation.
#[derive(Debug, Clone)]
pub struct PartSet {
    bits: Vec<u64>,
    count: u32,
}

impl PartSet {
    pub fn new(parts: u32) -> Self {
        PartSet {
            bits: vec![0; (parts as usize).div_ceil(64)],
            count: 0,
        }
    }

    pub fn contains(&self, i: u32) -> bool {
        self.bits[(i / 64) as usize] & (1 << (i % 64)) != 0
    }

    /// Returns true if the part was newly inserted.
    pub fn insert(&mut self, i: u32) -> bool {
        let w = &mut self.bits[(i / 64) as usize];
        let m = 1u64 << (i % 64);
        if *w & m != 0 {
            false
        } else {
            *w |= m;
            self.count += 1;
            true
        }
    }

    pub fn len(&self) -> u32 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

pub const NO_SOURCE: u32 = u32::MAX;

/// Per-node receive state for one propagation: D1/D2 and the per-part
/// first-heard attribution.
#[derive(Debug)]
pub struct ReceiveState {
    pub header_at: Option<f64>,
    pub parts: PartSet,
    pub part_total: u32,
    /// Part index -> raw node id of the peer it was first heard from.
    pub first_heard: Vec<u32>,
    pub complete_at: Option<f64>,
}

impl ReceiveState {
    pub fn new(part_total: u32) -> Self {
        ReceiveState {
            header_at: None,
            parts: PartSet::new(part_total),
            part_total,
            first_heard: vec![NO_SOURCE; part_total as usize],
            complete_at: None,
        }
    }

    /// Record a part arrival. Returns true when the part is new. The
    /// caller handles completion when `parts.len() == part_total`.
    pub fn receive_part(&mut self, index: u32, from: NodeId) -> bool {
        if self.parts.insert(index) {
            self.first_heard[index as usize] = from.0;
            true
        } else {
            false
        }
    }

    pub fn is_complete(&self) -> bool {
        self.parts.len() == self.part_total
    }

    /// Per-peer first-heard counts for this propagation.
    pub fn nfhdp_counts(&self) -> Vec<(NodeId, u32)> {
        let mut counts: Vec<(u32, u32)> = Vec::new();
        for &src in &self.first_heard {
            if src == NO_SOURCE {
                continue;
            }
            match counts.iter_mut().find(|(s, _)| *s == src) {
                Some((_, c)) => *c += 1,
                None => counts.push((src, 1)),
            }
        }
        counts.sort_unstable();
        counts.into_iter().map(|(s, c)| (NodeId(s), c)).collect()
    }
}

/// Per-node outgoing state for one propagation. `known` is the implicit
/// advertisement set: parts we sent to the peer plus parts the peer sent
/// to us. `sent` tracks our own transmissions to catch double-sends.
#[derive(Debug)]
pub struct PropSend {
    pub peer_order: Vec<NodeId>,
    pub known: Vec<PartSet>,
    pub sent: Vec<PartSet>,
    pub header_known: Vec<bool>,
    pub header_queue: VecDeque<u32>,
    pub part_queue: VecDeque<(u32, u32)>,
    /// Baseline only: peers the probabilistic forward gate switched off.
    pub gate_off: Vec<bool>,
}

impl PropSend {
    pub fn new(peers: Vec<NodeId>, parts: u32) -> Self {
        let n = peers.len();
        PropSend {
            peer_order: peers,
            known: (0..n).map(|_| PartSet::new(parts)).collect(),
            sent: (0..n).map(|_| PartSet::new(parts)).collect(),
            header_known: vec![false; n],
            header_queue: VecDeque::new(),
            part_queue: VecDeque::new(),
            gate_off: vec![false; n],
        }
    }

    pub fn peer_pos(&self, peer: NodeId) -> Option<usize> {
        self.peer_order.iter().position(|&p| p == peer)
    }

    /// Queue header sends to every peer that is not gated off.
    pub fn enqueue_headers(&mut self) {
        for i in 0..self.peer_order.len() {
            if !self.header_known[i] && !self.gate_off[i] {
                self.header_queue.push_back(i as u32);
            }
        }
    }

    /// Origin enqueue: the full moment-major assignment matrix, i.e.
    /// [`schedule_moment`] applied for every data moment in order.
    pub fn enqueue_all_moments(&mut self, parts: u32) {
        if parts == 0 {
            return;
        }
        for m in 0..parts {
            for i in 0..self.peer_order.len() {
                let part = (i as u32 + m) % parts;
                if !self.known[i].contains(part) && !self.gate_off[i] {
                    self.part_queue.push_back((i as u32, part));
                }
            }
        }
    }

    /// Relay enqueue for one newly acquired part.
    pub fn enqueue_part(&mut self, part: u32) {
        for i in 0..self.peer_order.len() {
            if !self.known[i].contains(part) && !self.gate_off[i] {
                self.part_queue.push_back((i as u32, part));
            }
        }
    }

    /// Late-joining peer (connection formed mid-propagation): offer the
    /// header plus every part currently held.
    pub fn add_peer(
        &mut self,
        peer: NodeId,
        parts: u32,
        held: impl IntoIterator<Item = u32>,
        gated: bool,
    ) {
        debug_assert!(self.peer_pos(peer).is_none());
        let i = self.peer_order.len() as u32;
        self.peer_order.push(peer);
        self.known.push(PartSet::new(parts));
        self.sent.push(PartSet::new(parts));
        self.header_known.push(false);
        self.gate_off.push(gated);
        if !gated {
            self.header_queue.push_back(i);
            for p in held {
                self.part_queue.push_back((i, p));
            }
        }
    }

    pub fn has_work(&self) -> bool {
        !self.header_queue.is_empty() || !self.part_queue.is_empty()
    }
}
