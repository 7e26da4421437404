//! Comparison protocol: DNS-style random bootstrap every block interval
//! and probabilistic retransmission. Never touches the ledger or the
//! agents; connections are plain symmetric links capped per node.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::agents::accept_probability_from_r;
use crate::types::{FxHashMap, NodeId, PairKey};

/// Uniform sample of 3-5 distinct nodes, never the inquirer. A registry
/// with fewer than 6 nodes returns all others.
pub fn dns_lookup(registry_size: u32, inquirer: NodeId, rng: &mut ChaCha8Rng) -> Vec<NodeId> {
    let others: Vec<NodeId> = (0..registry_size)
        .map(NodeId)
        .filter(|&n| n != inquirer)
        .collect();
    if registry_size < 6 {
        return others;
    }
    let k = rng.gen_range(3..=5usize);
    // Partial Fisher-Yates over the id space keeps the draw order stable.
    let mut pool = others;
    pool.partial_shuffle(rng, k).0.to_vec()
}

#[derive(Debug)]
pub struct BitswapState {
    pub peers: Vec<BTreeSet<NodeId>>,
    /// Connection insertion order per node, for oldest-first eviction.
    order: Vec<VecDeque<NodeId>>,
    pub connected_at: FxHashMap<PairKey, f64>,
    pub peer_cap: usize,
    pub dns_rng: ChaCha8Rng,
    pub forward_rng: ChaCha8Rng,
}

impl BitswapState {
    pub fn new(node_count: u32, peer_cap: usize, dns_rng: ChaCha8Rng, forward_rng: ChaCha8Rng) -> Self {
        BitswapState {
            peers: vec![BTreeSet::new(); node_count as usize],
            order: vec![VecDeque::new(); node_count as usize],
            connected_at: FxHashMap::default(),
            peer_cap,
            dns_rng,
            forward_rng,
        }
    }

    pub fn are_peers(&self, a: NodeId, b: NodeId) -> bool {
        self.peers[a.0 as usize].contains(&b)
    }

    fn connect(&mut self, a: NodeId, b: NodeId, now: f64) {
        if a == b || self.are_peers(a, b) {
            return;
        }
        self.peers[a.0 as usize].insert(b);
        self.peers[b.0 as usize].insert(a);
        self.order[a.0 as usize].push_back(b);
        self.order[b.0 as usize].push_back(a);
        self.connected_at.insert(PairKey::new(a, b), now);
        self.evict_over_cap(a);
        self.evict_over_cap(b);
    }

    fn disconnect(&mut self, a: NodeId, b: NodeId) {
        self.peers[a.0 as usize].remove(&b);
        self.peers[b.0 as usize].remove(&a);
        self.connected_at.remove(&PairKey::new(a, b));
    }

    fn evict_over_cap(&mut self, n: NodeId) {
        while self.peers[n.0 as usize].len() > self.peer_cap {
            // Skip stale order entries left behind by earlier evictions.
            match self.order[n.0 as usize].pop_front() {
                Some(old) if self.are_peers(n, old) => self.disconnect(n, old),
                Some(_) => {}
                None => break,
            }
        }
    }

    /// One block-interval bootstrap round: every node asks the directory
    /// for 3-5 nodes and connects to them; duplicates are ignored.
    pub fn tick(&mut self, node_count: u32, now: f64) -> Vec<(NodeId, NodeId)> {
        let mut fresh = Vec::new();
        for i in 0..node_count {
            let inquirer = NodeId(i);
            let found = dns_lookup(node_count, inquirer, &mut self.dns_rng);
            for peer in found {
                if !self.are_peers(inquirer, peer) && inquirer != peer {
                    self.connect(inquirer, peer, now);
                    fresh.push((inquirer, peer));
                }
            }
        }
        fresh
    }

    /// Probabilistic forward decision for one (propagation, peer) pair,
    /// using the acceptance-probability curve over connection age.
    pub fn forward_decision(&mut self, node: NodeId, peer: NodeId, now: f64) -> bool {
        let lt = self
            .connected_at
            .get(&PairKey::new(node, peer))
            .copied()
            .unwrap_or(0.0);
        let r = (now - lt) / 10.0;
        self.forward_rng.gen::<f64>() < accept_probability_from_r(r)
    }
}
