//! The event-loop orchestrator: binds the engine, the ledger, the
//! dissemination state, the per-node agents and the baseline into one
//! deterministic single-threaded simulation of one network.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{
    accept_probability, epsilon_at, fr_bin, pn_bin, AgentState, AliceAction, BaseAction, QTable,
    TAdjust, ALICE_ACTIONS,
};
use crate::bitswap::BitswapState;
use crate::config::Config;
use crate::dissemination::{part_count, part_size, PropSend, ReceiveState, HEADER_SIZE};
use crate::ledger::Ledger;
use crate::metrics::{compute_ab, compute_di, compute_exp_nfhdp, compute_fr, WindowEntry};
use crate::simnet::{
    pair_delay, probe_fetch_time, stream_rng, Event, EventQueue, Message, NodeProfile, Uplink,
};
use crate::types::{DataKind, FxHashMap, FxHashSet, NodeId, PairKey, PropId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Contract,
    Bitswap,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Contract => "contract",
            Protocol::Bitswap => "bitswap",
        }
    }
}

/// Cumulative per-peer accounting kept by each node for each active
/// contract. Reset on (re)connection.
#[derive(Debug, Clone, Default)]
pub struct PeerStats {
    pub sp: f64,
    pub nfhdc: u64,
    pub exp_nfhdc: f64,
}

/// One completed propagation at one node; feeds the FR/AB windows.
#[derive(Debug, Clone)]
pub struct CompletionRecord {
    pub d1: f64,
    pub d2: f64,
    pub size: u64,
    pub per_peer: Vec<(NodeId, u32, f64)>,
}

#[derive(Debug)]
pub struct NodeState {
    pub recv: FxHashMap<PropId, ReceiveState>,
    pub send: BTreeMap<PropId, PropSend>,
    rr_last: Option<PropId>,
    pub uplink: Uplink,
    buffered: FxHashMap<PropId, Vec<(u32, NodeId)>>,
    buffered_count: usize,
    pub duplicates: u64,
    pub dropped_parts: u64,
    // contract-protocol state
    pub peer_stats: BTreeMap<NodeId, PeerStats>,
    pub completions: VecDeque<CompletionRecord>,
    sp_cache: BTreeMap<NodeId, (u64, f64)>,
    pub alice_q: QTable,
    pub bob_q: QTable,
    pub t_param: f64,
    pub window_index: u32,
    alice_prev: Option<(AgentState, u8)>,
    bob_prev: Option<(AgentState, u8)>,
    prev_ab: Option<f64>,
    prev_rj: usize,
    pub bob_allow: bool,
    pub degraded_adds: u64,
}

impl NodeState {
    fn new(cfg: &Config) -> Self {
        NodeState {
            recv: FxHashMap::default(),
            send: BTreeMap::new(),
            rr_last: None,
            uplink: Uplink::new(),
            buffered: FxHashMap::default(),
            buffered_count: 0,
            duplicates: 0,
            dropped_parts: 0,
            peer_stats: BTreeMap::new(),
            completions: VecDeque::new(),
            sp_cache: BTreeMap::new(),
            alice_q: QTable::new(cfg.rl.alpha, cfg.rl.gamma),
            bob_q: QTable::new(cfg.rl.alpha, cfg.rl.gamma),
            t_param: cfg.rl.t_initial,
            window_index: 0,
            alice_prev: None,
            bob_prev: None,
            prev_ab: None,
            prev_rj: 0,
            bob_allow: true,
            degraded_adds: 0,
        }
    }
}

/// Global bookkeeping for one propagation.
#[derive(Debug)]
pub struct PropMeta {
    pub id: PropId,
    pub origin: NodeId,
    pub kind: DataKind,
    pub total_size: u64,
    pub parts: u32,
    pub digest: [u8; 32],
    pub start: f64,
    pub completions: u32,
    pub t50: Option<f64>,
    pub t90: Option<f64>,
    pub t100: Option<f64>,
    pub duplicates: u64,
}

impl PropMeta {
    /// Completion-time percentiles relative to the first header send,
    /// plus the fraction of nodes complete.
    pub fn metrics(&self, node_count: u32) -> (Option<f64>, Option<f64>, Option<f64>, f64) {
        let rel = |t: Option<f64>| t.map(|x| x - self.start);
        (
            rel(self.t50),
            rel(self.t90),
            rel(self.t100),
            self.completions as f64 / node_count as f64,
        )
    }
}

/// Finished-propagation output row.
#[derive(Debug, Clone)]
pub struct PropRow {
    pub id: PropId,
    pub origin: NodeId,
    pub kind: DataKind,
    pub size: u64,
    pub t50: Option<f64>,
    pub t90: Option<f64>,
    pub t100: Option<f64>,
    pub duplicates: u64,
    pub fraction: f64,
}

/// Per-window agent output row.
#[derive(Debug, Clone)]
pub struct AgentRow {
    pub node: NodeId,
    pub window_end: f64,
    pub fr: f64,
    pub pn: usize,
    pub t_param: f64,
    pub ab: Option<f64>,
    pub alice_action: String,
    pub bob_action: String,
    pub reward_alice: Option<f64>,
    pub reward_bob: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Counters {
    pub double_send_violations: u64,
    pub restriction_rejections: u64,
    pub deferred_drops: u64,
    pub expired_props: u64,
}

pub struct Simulation {
    pub cfg: Config,
    pub protocol: Protocol,
    pub profiles: Vec<NodeProfile>,
    pub clock: f64,
    pub queue: EventQueue,
    pub nodes: Vec<NodeState>,
    pub ledger: Ledger,
    pub bitswap: Option<BitswapState>,
    pub last_connect: FxHashMap<PairKey, f64>,
    pub props: FxHashMap<PropId, PropMeta>,
    pub done_props: FxHashSet<PropId>,
    pub prop_rows: Vec<PropRow>,
    pub agent_rows: Vec<AgentRow>,
    pub counters: Counters,
    next_prop_id: PropId,
    delay_seed: u64,
    explore_rng: ChaCha8Rng,
    duration: f64,
    /// Scratch stamp sets for allocation-free neighborhood counting in
    /// the candidate scans (peer-list membership / SubPL dedup).
    pl_stamp: StampSet,
    sub_stamp: StampSet,
}

/// Reusable membership marker: an entry is "in" when its stamp equals
/// the current generation, so clearing is a single counter bump.
struct StampSet {
    mark: Vec<u64>,
    gen: u64,
}

impl StampSet {
    fn new(n: usize) -> Self {
        StampSet {
            mark: vec![0; n],
            gen: 0,
        }
    }
}

impl Simulation {
    /// Build one network. `profiles` must have one entry per node id in
    /// order; mirror networks pass the same profiles and master seed.
    pub fn new(cfg: Config, protocol: Protocol, profiles: Vec<NodeProfile>) -> Self {
        assert_eq!(profiles.len(), cfg.node_count as usize);
        let master = cfg.seed;
        let delay_seed = crate::simnet::stream_seed(master, "delay");
        let explore_rng = match cfg.explore_seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => stream_rng(master, "explore"),
        };
        let bitswap = match protocol {
            Protocol::Bitswap => Some(BitswapState::new(
                cfg.node_count,
                cfg.bitswap_peer_cap,
                stream_rng(master, "dns"),
                stream_rng(master, "forward"),
            )),
            Protocol::Contract => None,
        };
        let nodes = (0..cfg.node_count).map(|_| NodeState::new(&cfg)).collect();
        let duration = cfg.duration_seconds();
        let node_total = cfg.node_count as usize;
        let mut sim = Simulation {
            cfg,
            protocol,
            profiles,
            clock: 0.0,
            queue: EventQueue::new(),
            nodes,
            ledger: Ledger::new(),
            bitswap,
            last_connect: FxHashMap::default(),
            props: FxHashMap::default(),
            done_props: FxHashSet::default(),
            prop_rows: Vec::new(),
            agent_rows: Vec::new(),
            counters: Counters::default(),
            next_prop_id: 0,
            delay_seed,
            explore_rng,
            duration,
            pl_stamp: StampSet::new(node_total),
            sub_stamp: StampSet::new(node_total),
        };
        if sim.protocol == Protocol::Contract {
            sim.genesis_connections();
            for i in 0..sim.cfg.node_count {
                // Per-node microsecond skew keeps ledger mutations from
                // distinct nodes off identical timestamps, so the contract
                // log's (time, termination-first, id) order is the exact
                // execution order and replay is faithful.
                let w = sim.profiles[i as usize].w as f64 + i as f64 * 1e-6;
                sim.queue.schedule(w, Event::AgentWakeup { node: NodeId(i) });
            }
        }
        sim
    }

    /// Two random rule-respecting connections initiated by every node.
    fn genesis_connections(&mut self) {
        let n = self.cfg.node_count;
        let mut rng = stream_rng(self.cfg.seed, "topology");
        for i in 0..n {
            let a = NodeId(i);
            for _ in 0..self.cfg.initial_connections {
                for _attempt in 0..32 {
                    let b = NodeId(rng.gen_range(0..n));
                    if a == b {
                        continue;
                    }
                    if self.ledger.would_violate(a, b, None) {
                        continue;
                    }
                    self.ledger
                        .register_contract(a, b, 0.0)
                        .expect("checked registration");
                    self.on_contract_created(a, b, 0.0);
                    break;
                }
            }
        }
    }

    fn on_contract_created(&mut self, a: NodeId, b: NodeId, now: f64) {
        self.nodes[a.0 as usize]
            .peer_stats
            .insert(b, PeerStats::default());
        self.nodes[b.0 as usize]
            .peer_stats
            .insert(a, PeerStats::default());
        self.last_connect.insert(PairKey::new(a, b), now);
        self.offer_active_props(now, a, b);
    }

    /// A connection formed mid-propagation: each endpoint offers the
    /// header and every part it currently holds for all live
    /// propagations, so late joiners are not stranded.
    fn offer_active_props(&mut self, now: f64, a: NodeId, b: NodeId) {
        let ids: Vec<PropId> = self.props.keys().copied().collect();
        for (x, y) in [(a, b), (b, a)] {
            let mut offered = false;
            for &prop in &ids {
                let Some(meta) = self.props.get(&prop) else {
                    continue;
                };
                let (origin, parts) = (meta.origin, meta.parts);
                let held: Vec<u32> = if origin == x {
                    (0..parts).collect()
                } else {
                    match self.nodes[x.0 as usize].recv.get(&prop) {
                        Some(rs) => (0..parts).filter(|&i| rs.parts.contains(i)).collect(),
                        None => continue,
                    }
                };
                // Offers are never gated: catch-up on connect is a
                // receiver-driven exchange, unlike push forwarding.
                let ps = self.nodes[x.0 as usize]
                    .send
                    .entry(prop)
                    .or_insert_with(|| PropSend::new(Vec::new(), parts));
                // A stale position from an earlier contract between the
                // same pair keeps its sent-set; leave it untouched.
                if ps.peer_pos(y).is_some() {
                    continue;
                }
                ps.add_peer(y, parts, held, false);
                offered = true;
            }
            if offered {
                self.pump(now, x);
            }
        }
    }

    fn on_contract_terminated(&mut self, a: NodeId, b: NodeId) {
        self.nodes[a.0 as usize].peer_stats.remove(&b);
        self.nodes[b.0 as usize].peer_stats.remove(&a);
    }

    pub fn delay(&self, a: NodeId, b: NodeId) -> f64 {
        pair_delay(self.delay_seed, a, b, self.cfg.delay_min, self.cfg.delay_max)
    }

    fn connected(&self, a: NodeId, b: NodeId) -> bool {
        match self.protocol {
            Protocol::Contract => self.ledger.are_peers(a, b),
            Protocol::Bitswap => self.bitswap.as_ref().unwrap().are_peers(a, b),
        }
    }

    fn peers_of(&self, n: NodeId) -> Vec<NodeId> {
        match self.protocol {
            Protocol::Contract => self.ledger.peers_of(n).into_iter().collect(),
            Protocol::Bitswap => self.bitswap.as_ref().unwrap().peers[n.0 as usize]
                .iter()
                .copied()
                .collect(),
        }
    }

    // ---- driving ---------------------------------------------------------

    /// Process events up to and including `t_end`; the clock lands on
    /// `t_end`. Event times must never precede the clock.
    pub fn run_until(&mut self, t_end: f64) -> u64 {
        let mut count = 0;
        while let Some(t) = self.queue.peek_time() {
            if t > t_end {
                break;
            }
            let (t, ev) = self.queue.pop().unwrap();
            assert!(
                t >= self.clock - 1e-9,
                "event at {t} precedes clock {}",
                self.clock
            );
            self.clock = t;
            self.handle_event(t, ev);
            count += 1;
        }
        self.clock = self.clock.max(t_end);
        count
    }

    /// Run until the given propagation is globally complete (or the
    /// deadline passes); returns true on completion.
    pub fn run_until_prop_done(&mut self, prop: PropId, deadline: f64) -> bool {
        while !self.done_props.contains(&prop) {
            match self.queue.peek_time() {
                Some(t) if t <= deadline => {
                    let (t, ev) = self.queue.pop().unwrap();
                    self.clock = t;
                    self.handle_event(t, ev);
                }
                _ => break,
            }
        }
        if let Some(meta) = self.props.get(&prop) {
            if meta.t100.is_some() {
                self.finish_prop(prop);
                return true;
            }
            return false;
        }
        true
    }

    /// Interval boundary work: baseline DNS bootstrap plus expiry of
    /// long-stalled propagations.
    pub fn begin_interval(&mut self, index: u32) {
        let now = index as f64 * self.cfg.block_interval;
        self.clock = self.clock.max(now);
        if let Some(bs) = self.bitswap.as_mut() {
            let fresh = bs.tick(self.cfg.node_count, now);
            for (a, b) in fresh {
                self.offer_active_props(now, a, b);
            }
        }
        let horizon = now - self.cfg.gc_intervals as f64 * self.cfg.block_interval;
        let stale: Vec<PropId> = self
            .props
            .iter()
            .filter(|(_, m)| m.start < horizon && m.t100.is_none())
            .map(|(&id, _)| id)
            .collect();
        for id in stale {
            self.counters.expired_props += 1;
            self.finish_prop(id);
        }
    }

    pub fn schedule_publish(&mut self, at: f64, node: NodeId, size: u64, kind: DataKind) {
        self.queue.schedule(at, Event::Publish { node, size, kind });
    }

    /// Finish the run: flush still-open propagations as incomplete rows.
    pub fn finalize(&mut self) {
        let open: Vec<PropId> = self.props.keys().copied().collect();
        for id in open {
            self.finish_prop(id);
        }
        self.prop_rows.sort_by_key(|r| r.id);
    }

    // ---- event handling --------------------------------------------------

    fn handle_event(&mut self, now: f64, ev: Event) {
        match ev {
            Event::Delivery { from, to, msg } => match msg {
                Message::Header {
                    prop,
                    origin,
                    kind,
                    total_size,
                } => self.deliver_header(now, from, to, prop, origin, kind, total_size),
                Message::Part { prop, index } => self.deliver_part(now, from, to, prop, index),
            },
            Event::UplinkSlot { node } => {
                let i = node.0 as usize;
                self.nodes[i].uplink.slot_scheduled = false;
                self.try_send(now, node);
            }
            Event::AgentWakeup { node } => self.agent_wakeup(now, node),
            Event::Publish { node, size, kind } => {
                self.publish(node, size, kind);
            }
            Event::LedgerApply { a, b, replace } => self.apply_deferred(now, a, b, replace),
        }
    }

    // ---- dissemination ---------------------------------------------------

    /// Start a new propagation from `origin`, which holds all parts.
    pub fn publish(&mut self, origin: NodeId, size: u64, kind: DataKind) -> PropId {
        let id = self.next_prop_id;
        self.next_prop_id += 1;
        let parts = part_count(size);
        let mut digest = [0u8; 32];
        for (i, b) in digest.iter_mut().enumerate() {
            *b = (id
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(i as u64)
                .rotate_left((i % 63) as u32)
                & 0xff) as u8;
        }
        let now = self.clock;
        let mut meta = PropMeta {
            id,
            origin,
            kind,
            total_size: size,
            parts,
            digest,
            start: now,
            completions: 1, // the origin holds the data
            t50: None,
            t90: None,
            t100: None,
            duplicates: 0,
        };
        Self::update_thresholds(&mut meta, now, self.cfg.node_count);
        let globally_done = meta.t100.is_some();
        self.props.insert(id, meta);

        let peers = self.peers_of(origin);
        let mut ps = PropSend::new(peers, parts);
        ps.enqueue_headers();
        ps.enqueue_all_moments(parts);
        self.nodes[origin.0 as usize].send.insert(id, ps);
        self.pump(now, origin);
        if globally_done {
            self.finish_prop(id);
        }
        id
    }

    fn update_thresholds(meta: &mut PropMeta, now: f64, node_count: u32) {
        let n = node_count as f64;
        let c = meta.completions as f64;
        if meta.t50.is_none() && c >= (0.5 * n).ceil() {
            meta.t50 = Some(now);
        }
        if meta.t90.is_none() && c >= (0.9 * n).ceil() {
            meta.t90 = Some(now);
        }
        if meta.t100.is_none() && meta.completions == node_count {
            meta.t100 = Some(now);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deliver_header(
        &mut self,
        now: f64,
        from: NodeId,
        to: NodeId,
        prop: PropId,
        origin: NodeId,
        kind: DataKind,
        total_size: u64,
    ) {
        if self.done_props.contains(&prop) {
            return;
        }
        let Some(meta) = self.props.get_mut(&prop) else {
            return;
        };
        if meta.origin == to {
            meta.duplicates += 1;
            return;
        }
        let parts = meta.parts;
        let _ = (origin, kind, total_size);

        let first_time = !self.nodes[to.0 as usize].recv.contains_key(&prop);
        if first_time {
            // Learn of the propagation: receive state, send state with a
            // snapshot of current peers, header relays.
            let peers = self.peers_of(to);
            let mut ps = PropSend::new(peers, parts);
            if let Some(bs) = self.bitswap.as_mut() {
                for (i, &peer) in ps.peer_order.clone().iter().enumerate() {
                    ps.gate_off[i] = !bs.forward_decision(to, peer, now);
                }
            }
            let mut rs = ReceiveState::new(parts);
            rs.header_at = Some(now);
            if let Some(pos) = ps.peer_pos(from) {
                ps.header_known[pos] = true;
            }
            ps.enqueue_headers();
            let node = &mut self.nodes[to.0 as usize];
            node.recv.insert(prop, rs);
            node.send.insert(prop, ps);
            // Flush parts that raced ahead of the header.
            if let Some(buf) = self.nodes[to.0 as usize].buffered.remove(&prop) {
                self.nodes[to.0 as usize].buffered_count -= buf.len();
                for (index, src) in buf {
                    self.receive_part(now, src, to, prop, index);
                }
            }
        } else {
            let node = &mut self.nodes[to.0 as usize];
            if let Some(ps) = node.send.get_mut(&prop) {
                if let Some(pos) = ps.peer_pos(from) {
                    ps.header_known[pos] = true;
                }
            }
            if node.recv.get(&prop).is_some_and(|rs| rs.header_at.is_some()) {
                // Duplicate header.
                if let Some(meta) = self.props.get_mut(&prop) {
                    meta.duplicates += 1;
                }
            }
        }
        self.pump(now, to);
    }

    fn deliver_part(&mut self, now: f64, from: NodeId, to: NodeId, prop: PropId, index: u32) {
        if self.done_props.contains(&prop) {
            return;
        }
        let Some(meta) = self.props.get_mut(&prop) else {
            return;
        };
        if meta.origin == to {
            meta.duplicates += 1;
            return;
        }
        let node = &mut self.nodes[to.0 as usize];
        if !node.recv.contains_key(&prop) {
            // Part raced ahead of its header; buffer within budget.
            if node.buffered_count < 1024 {
                node.buffered.entry(prop).or_default().push((index, from));
                node.buffered_count += 1;
            } else {
                node.dropped_parts += 1;
            }
            return;
        }
        self.receive_part(now, from, to, prop, index);
        self.pump(now, to);
    }

    /// Core part-receipt path: first-heard accounting, implicit
    /// advertisement, relay enqueue, completion detection.
    fn receive_part(&mut self, now: f64, from: NodeId, to: NodeId, prop: PropId, index: u32) {
        let node = &mut self.nodes[to.0 as usize];
        let Some(rs) = node.recv.get_mut(&prop) else {
            return;
        };
        if rs.complete_at.is_some() {
            node.duplicates += 1;
            if let Some(meta) = self.props.get_mut(&prop) {
                meta.duplicates += 1;
            }
            return;
        }
        let is_new = rs.receive_part(index, from);
        let complete = rs.is_complete();
        if let Some(ps) = node.send.get_mut(&prop) {
            if let Some(pos) = ps.peer_pos(from) {
                ps.known[pos].insert(index);
            }
            if is_new {
                ps.enqueue_part(index);
            }
        }
        if !is_new {
            node.duplicates += 1;
            if let Some(meta) = self.props.get_mut(&prop) {
                meta.duplicates += 1;
            }
            return;
        }
        if complete {
            self.complete_at_node(now, to, prop);
        }
    }

    /// A node finished hearing a propagation: set D2, run the metric
    /// pipeline (contract protocol), update global thresholds.
    fn complete_at_node(&mut self, now: f64, n: NodeId, prop: PropId) {
        let (d1, size, per_peer_counts) = {
            let rs = self.nodes[n.0 as usize].recv.get_mut(&prop).unwrap();
            rs.complete_at = Some(now);
            let meta = &self.props[&prop];
            (
                rs.header_at.unwrap_or(meta.start),
                meta.total_size,
                rs.nfhdp_counts(),
            )
        };

        if self.protocol == Protocol::Contract {
            self.peer_metrics_pipeline(now, n, d1, size, per_peer_counts);
        }

        let meta = self.props.get_mut(&prop).unwrap();
        meta.completions += 1;
        Self::update_thresholds(meta, now, self.cfg.node_count);
        if meta.t100.is_some() {
            self.finish_prop(prop);
        }
    }

    /// Per-propagation scoring: SP per current peer, the Grubbs-robust
    /// expectation among similar-SP peers, and the cumulative counters.
    fn peer_metrics_pipeline(
        &mut self,
        now: f64,
        n: NodeId,
        d1: f64,
        size: u64,
        counts: Vec<(NodeId, u32)>,
    ) {
        let peers: Vec<NodeId> = self.ledger.peers_of(n).into_iter().collect();
        if peers.is_empty() {
            return;
        }
        let sps: Vec<f64> = peers.iter().map(|&p| self.peer_sp(n, p, now)).collect();
        let node = &mut self.nodes[n.0 as usize];
        let stats: Vec<(f64, u32)> = peers
            .iter()
            .zip(&sps)
            .map(|(&p, &sp)| {
                let c = counts
                    .iter()
                    .find(|&&(src, _)| src == p)
                    .map_or(0, |&(_, c)| c);
                (sp, c)
            })
            .collect();
        let exp = compute_exp_nfhdp(&stats, node.t_param);
        let mut per_peer = Vec::with_capacity(peers.len());
        for ((&p, &(sp, nfhdp)), &e) in peers.iter().zip(&stats).zip(&exp) {
            let st = node.peer_stats.entry(p).or_default();
            st.sp = sp;
            st.nfhdc += nfhdp as u64;
            st.exp_nfhdc += e;
            per_peer.push((p, nfhdp, e));
        }
        node.completions.push_back(CompletionRecord {
            d1,
            d2: now,
            size,
            per_peer,
        });
        // Keep a little more than two windows of history.
        let w = self.profiles[n.0 as usize].w as f64;
        let cutoff = now - (2.0 * w + 2.0 * self.cfg.block_interval);
        while node
            .completions
            .front()
            .is_some_and(|r| r.d2 < cutoff)
        {
            node.completions.pop_front();
        }
    }

    /// Stamp `n`'s peer list into the scratch set; returns the
    /// generation to test membership against.
    fn mark_peer_list(&mut self, n: NodeId) -> u64 {
        self.pl_stamp.gen += 1;
        let g = self.pl_stamp.gen;
        if let Some(peers) = self.ledger.peers_ref(n) {
            for p in peers {
                self.pl_stamp.mark[p.0 as usize] = g;
            }
        }
        g
    }

    /// IPC toward `b` against the peer list stamped at `pl_gen`:
    /// |SubPL_b minus PL_a| / PN_b, counted without building the sets.
    /// None when `b` has no peers.
    fn ipc_fast(&mut self, pl_gen: u64, b: NodeId) -> Option<f64> {
        let pn_b = self.ledger.pn(b);
        if pn_b == 0 {
            return None;
        }
        self.sub_stamp.gen += 1;
        let sg = self.sub_stamp.gen;
        let mut unseen = 0usize;
        if let Some(peers) = self.ledger.peers_ref(b) {
            for p in peers {
                if let Some(pp) = self.ledger.peers_ref(*p) {
                    for q in pp {
                        if *q == b {
                            continue;
                        }
                        let qi = q.0 as usize;
                        if self.sub_stamp.mark[qi] == sg {
                            continue;
                        }
                        self.sub_stamp.mark[qi] = sg;
                        if self.pl_stamp.mark[qi] != pl_gen {
                            unseen += 1;
                        }
                    }
                }
            }
        }
        Some(unseen as f64 / pn_b as f64)
    }

    /// SP of `peer` from `n`'s perspective. The PN*IPC factor is cached
    /// per ledger version; ND comes from the analytic probe model.
    fn peer_sp(&mut self, n: NodeId, peer: NodeId, now: f64) -> f64 {
        let version = self.ledger.version();
        let pn_ipc = match self.nodes[n.0 as usize].sp_cache.get(&peer) {
            Some(&(v, val)) if v == version => val,
            _ => {
                let g = self.mark_peer_list(n);
                let val = match self.ipc_fast(g, peer) {
                    Some(ipc) => self.ledger.pn(peer) as f64 * ipc,
                    None => 0.0,
                };
                self.nodes[n.0 as usize]
                    .sp_cache
                    .insert(peer, (version, val));
                val
            }
        };
        let nd = 1.0 / self.probe_nd_time(n, peer, now);
        pn_ipc * (1.0 + nd)
    }

    /// 1 MB-equivalent fetch time from `b`, through `b`'s uplink model.
    pub fn probe_nd_time(&self, a: NodeId, b: NodeId, now: f64) -> f64 {
        probe_fetch_time(
            self.delay(a, b),
            self.profiles[b.0 as usize].upload_bw,
            self.nodes[b.0 as usize].uplink.backlog(now),
        )
    }

    /// Remove every trace of a finished propagation and emit its row.
    fn finish_prop(&mut self, prop: PropId) {
        let Some(meta) = self.props.remove(&prop) else {
            return;
        };
        self.done_props.insert(prop);
        for node in &mut self.nodes {
            node.recv.remove(&prop);
            node.send.remove(&prop);
            if let Some(buf) = node.buffered.remove(&prop) {
                node.buffered_count -= buf.len();
            }
        }
        let (t50, t90, t100, fraction) = meta.metrics(self.cfg.node_count);
        self.prop_rows.push(PropRow {
            id: meta.id,
            origin: meta.origin,
            kind: meta.kind,
            size: meta.total_size,
            t50,
            t90,
            t100,
            duplicates: meta.duplicates,
            fraction,
        });
    }

    // ---- uplink pump -----------------------------------------------------

    /// Ensure the node's uplink keeps draining its send queues.
    fn pump(&mut self, now: f64, n: NodeId) {
        let node = &mut self.nodes[n.0 as usize];
        if node.uplink.slot_scheduled {
            return;
        }
        if node.uplink.free_at > now {
            node.uplink.slot_scheduled = true;
            let at = node.uplink.free_at;
            self.queue.schedule(at, Event::UplinkSlot { node: n });
            return;
        }
        self.try_send(now, n);
    }

    /// Send the next queued candidate, if any, and schedule the next
    /// uplink slot. Round-robins across active propagations by id;
    /// headers go out before a propagation's parts.
    fn try_send(&mut self, now: f64, n: NodeId) {
        let Some((prop, target, payload_size, msg)) = self.pick_candidate(now, n) else {
            return;
        };
        let bw = self.profiles[n.0 as usize].upload_bw;
        let link_delay = self.delay(n, target);
        let node = &mut self.nodes[n.0 as usize];
        let (done, arrival) = node.uplink.transmit(now, payload_size as u64, bw, link_delay);
        node.rr_last = Some(prop);
        node.uplink.slot_scheduled = true;
        self.queue.schedule(
            arrival,
            Event::Delivery {
                from: n,
                to: target,
                msg,
            },
        );
        self.queue.schedule(done, Event::UplinkSlot { node: n });
    }

    /// Pop the next sendable (propagation, peer, payload) from the
    /// node's queues, skipping entries invalidated by advertisements,
    /// dropped connections or finished propagations.
    fn pick_candidate(&mut self, _now: f64, n: NodeId) -> Option<(PropId, NodeId, u32, Message)> {
        let i = n.0 as usize;
        // Candidate props in round-robin order starting after rr_last.
        let prop_ids: Vec<PropId> = {
            let node = &self.nodes[i];
            let start = node.rr_last;
            let mut ids: Vec<PropId> = match start {
                Some(last) => node
                    .send
                    .range((
                        std::ops::Bound::Excluded(last),
                        std::ops::Bound::Unbounded,
                    ))
                    .map(|(&id, _)| id)
                    .chain(node.send.range(..=last).map(|(&id, _)| id))
                    .collect(),
                None => node.send.keys().copied().collect(),
            };
            ids.dedup();
            ids
        };
        let mut emptied: Vec<PropId> = Vec::new();
        let mut found = None;
        'props: for prop in prop_ids {
            if self.done_props.contains(&prop) {
                emptied.push(prop);
                continue;
            }
            let Some(meta) = self.props.get(&prop) else {
                emptied.push(prop);
                continue;
            };
            let (origin, kind, total_size, parts) =
                (meta.origin, meta.kind, meta.total_size, meta.parts);
            let _ = parts;
            // Header sends first.
            loop {
                let node = &mut self.nodes[i];
                let Some(ps) = node.send.get_mut(&prop) else {
                    continue 'props;
                };
                let Some(pos) = ps.header_queue.pop_front() else {
                    break;
                };
                let pos = pos as usize;
                if ps.header_known[pos] {
                    continue;
                }
                let peer = ps.peer_order[pos];
                if !self.connected(n, peer) {
                    continue;
                }
                let node = &mut self.nodes[i];
                let ps = node.send.get_mut(&prop).unwrap();
                ps.header_known[pos] = true;
                found = Some((
                    prop,
                    peer,
                    HEADER_SIZE,
                    Message::Header {
                        prop,
                        origin,
                        kind,
                        total_size,
                    },
                ));
                break 'props;
            }
            // Then parts.
            loop {
                let node = &mut self.nodes[i];
                let Some(ps) = node.send.get_mut(&prop) else {
                    continue 'props;
                };
                let Some((pos, part)) = ps.part_queue.pop_front() else {
                    break;
                };
                let pos = pos as usize;
                if ps.known[pos].contains(part) {
                    continue;
                }
                let peer = ps.peer_order[pos];
                if !self.connected(n, peer) {
                    continue;
                }
                let node = &mut self.nodes[i];
                let ps = node.send.get_mut(&prop).unwrap();
                if !ps.sent[pos].insert(part) {
                    self.counters.double_send_violations += 1;
                    continue;
                }
                ps.known[pos].insert(part);
                found = Some((
                    prop,
                    peer,
                    part_size(total_size, part),
                    Message::Part { prop, index: part },
                ));
                break 'props;
            }
            // Queues drained: drop the send state once nothing new can
            // ever be enqueued (we hold the complete data or authored it).
            let node = &self.nodes[i];
            if let Some(ps) = node.send.get(&prop) {
                if !ps.has_work() {
                    let complete = origin == n
                        || node
                            .recv
                            .get(&prop)
                            .is_some_and(|rs| rs.complete_at.is_some());
                    if complete {
                        emptied.push(prop);
                    }
                }
            }
        }
        for prop in emptied {
            self.nodes[i].send.remove(&prop);
        }
        found
    }

    // ---- agents ----------------------------------------------------------

    fn agent_wakeup(&mut self, now: f64, n: NodeId) {
        let i = n.0 as usize;
        let w = self.profiles[i].w as f64;
        self.queue.schedule(now + w, Event::AgentWakeup { node: n });

        self.nodes[i].window_index += 1;
        let window_index = self.nodes[i].window_index;
        let pn = self.ledger.pn(n);

        // Window observations.
        let entries: Vec<WindowEntry<f64>> = self.nodes[i]
            .completions
            .iter()
            .filter(|r| r.d2 >= now - w && r.d2 < now)
            .map(|r| WindowEntry {
                d1: r.d1,
                d2: r.d2,
                data_size: r.size as f64,
                peer_counts: r.per_peer.clone(),
            })
            .collect();
        let fr = if pn == 0 {
            0.0
        } else {
            compute_fr(&entries, pn).expect("pn > 0")
        };
        let ab = compute_ab(&entries);
        let rj_now = self.ledger.rj_count(n, now - w, now);
        let state = AgentState {
            fr_bin: fr_bin(fr, self.cfg.rl.fr_bins),
            pn_bin: pn_bin(pn),
        };
        let ab_now = ab.or(self.nodes[i].prev_ab).unwrap_or(0.0);

        // The first two windows observe only: no update, no action.
        if window_index <= 2 {
            self.nodes[i].prev_ab = Some(ab_now);
            self.nodes[i].prev_rj = rj_now;
            self.agent_rows.push(AgentRow {
                node: n,
                window_end: now,
                fr,
                pn,
                t_param: self.nodes[i].t_param,
                ab,
                alice_action: "observe".into(),
                bob_action: "observe".into(),
                reward_alice: None,
                reward_bob: None,
            });
            self.ledger.prune_rj_before(n, now - 2.0 * w);
            return;
        }

        let epsilon = epsilon_at(
            self.cfg.rl.epsilon,
            self.cfg.rl.epsilon_final,
            now,
            self.duration,
        );

        // Alice: learn from the previous action, then pick and execute.
        let reward_alice = self.nodes[i].prev_ab.map(|prev| ab_now - prev);
        if let (Some((ps, pa)), Some(r)) = (self.nodes[i].alice_prev, reward_alice) {
            self.nodes[i].alice_q.update(ps, pa, r, state, 12);
        }
        let a_idx = self.nodes[i]
            .alice_q
            .select(state, 12, epsilon, &mut self.explore_rng);
        let action = ALICE_ACTIONS[a_idx as usize];
        let label = self.execute_alice(now, n, action);
        self.nodes[i].alice_prev = Some((state, a_idx));
        self.nodes[i].prev_ab = Some(ab_now);

        // Bob: reward is the negated growth in terminations-by-others.
        let reward_bob = -((rj_now as f64) - (self.nodes[i].prev_rj as f64));
        if let Some((ps, pa)) = self.nodes[i].bob_prev {
            self.nodes[i].bob_q.update(ps, pa, reward_bob, state, 2);
        }
        let b_idx = self.nodes[i]
            .bob_q
            .select(state, 2, epsilon, &mut self.explore_rng);
        self.nodes[i].bob_allow = b_idx == 0;
        self.nodes[i].bob_prev = Some((state, b_idx));
        self.nodes[i].prev_rj = rj_now;

        self.agent_rows.push(AgentRow {
            node: n,
            window_end: now,
            fr,
            pn,
            t_param: self.nodes[i].t_param,
            ab,
            alice_action: label,
            bob_action: if b_idx == 0 { "allow" } else { "notallow" }.into(),
            reward_alice,
            reward_bob: Some(reward_bob),
        });
        self.ledger.prune_rj_before(n, now - 2.0 * w);
    }

    /// Execute Alice's composite action; returns the outcome label.
    fn execute_alice(&mut self, now: f64, n: NodeId, action: AliceAction) -> String {
        let i = n.0 as usize;
        let base_label = match action.base {
            BaseAction::Add => match self.choose_add_candidate(now, n, None) {
                Some(c) => {
                    self.submit_registration(now, n, c, None);
                    "add".to_string()
                }
                None => {
                    self.nodes[i].degraded_adds += 1;
                    "add/stay".to_string()
                }
            },
            BaseAction::Replace1 | BaseAction::Replace2 => {
                let victim = if action.base == BaseAction::Replace1 {
                    self.lowest_di_peer(n)
                } else {
                    self.highest_ipc_peer(n)
                };
                match victim {
                    None => "replace/stay".to_string(),
                    Some(v) => match self.choose_add_candidate(now, n, Some(v)) {
                        Some(c) => {
                            self.submit_registration(now, n, c, Some(v));
                            if action.base == BaseAction::Replace1 {
                                "replace1".to_string()
                            } else {
                                "replace2".to_string()
                            }
                        }
                        None => "replace/stay".to_string(),
                    },
                }
            }
            BaseAction::Stay => "stay".to_string(),
        };
        match action.t_adjust {
            TAdjust::Up => {
                let t = &mut self.nodes[i].t_param;
                *t = (*t + 0.25).min(self.cfg.rl.t_max);
                format!("{base_label}+t")
            }
            TAdjust::Down => {
                let t = &mut self.nodes[i].t_param;
                *t = (*t - 0.25).max(0.0);
                format!("{base_label}-t")
            }
            TAdjust::None => base_label,
        }
    }

    /// The peer with the smallest Determine Index (Replace1's victim).
    fn lowest_di_peer(&self, n: NodeId) -> Option<NodeId> {
        self.nodes[n.0 as usize]
            .peer_stats
            .iter()
            .map(|(&p, st)| (p, compute_di(st.nfhdc, st.exp_nfhdc)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(p, _)| p)
    }

    /// The peer with the highest IPC from this node's perspective
    /// (Replace2's victim).
    fn highest_ipc_peer(&mut self, n: NodeId) -> Option<NodeId> {
        let g = self.mark_peer_list(n);
        let pl_n: Vec<NodeId> = self.peers_of(n);
        let mut best: Option<(f64, NodeId)> = None;
        for p in pl_n {
            let Some(ipc) = self.ipc_fast(g, p) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((bi, bp)) => ipc > bi || (ipc == bi && p < bp),
            };
            if better {
                best = Some((ipc, p));
            }
        }
        best.map(|(_, p)| p)
    }

    /// Candidate scan for Add: every ledger-known node except self,
    /// current peers and rule violators, ranked by SP descending, first
    /// willing accepter wins. `exclude` marks a peer being replaced in
    /// the same breath.
    fn choose_add_candidate(
        &mut self,
        now: f64,
        n: NodeId,
        exclude: Option<NodeId>,
    ) -> Option<NodeId> {
        let ignore = exclude.map(|v| (n, v));
        let pl_gen = self.mark_peer_list(n);
        let mut scored: Vec<(f64, NodeId)> = Vec::new();
        for c in 0..self.cfg.node_count {
            let cand = NodeId(c);
            if cand == n || Some(cand) == exclude {
                continue;
            }
            if self.ledger.are_peers(n, cand) {
                continue;
            }
            if self.ledger.would_violate(n, cand, ignore) {
                continue;
            }
            let sp = match self.ipc_fast(pl_gen, cand) {
                None => 0.0,
                Some(ipc) => {
                    let pn_b = self.ledger.pn(cand);
                    let nd = 1.0 / self.probe_nd_time(n, cand, now);
                    crate::metrics::compute_sp(pn_b, ipc, nd)
                }
            };
            scored.push((sp, cand));
        }
        // Highest SP first; ties break toward the lowest id.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, cand) in scored {
            if !self.nodes[cand.0 as usize].bob_allow {
                continue;
            }
            let p = accept_probability(
                self.last_connect.get(&PairKey::new(n, cand)).copied(),
                now,
                self.cfg.literal_r_formula,
            );
            if self.explore_rng.gen::<f64>() < p {
                return Some(cand);
            }
        }
        None
    }

    /// Register (or replace) through the ledger, honoring the configured
    /// visibility delay.
    fn submit_registration(&mut self, now: f64, a: NodeId, b: NodeId, replace: Option<NodeId>) {
        if self.cfg.visibility_delay > 0.0 {
            self.queue.schedule(
                now + self.cfg.visibility_delay,
                Event::LedgerApply { a, b, replace },
            );
            return;
        }
        self.apply_deferred(now, a, b, replace);
    }

    fn apply_deferred(&mut self, now: f64, a: NodeId, b: NodeId, replace: Option<NodeId>) {
        let result = match replace {
            Some(old) => self.ledger.terminate_and_register(a, old, b, now).map(|id| {
                self.on_contract_terminated(a, old);
                id
            }),
            None => self.ledger.register_contract(a, b, now),
        };
        match result {
            Ok(_) => self.on_contract_created(a, b, now),
            Err(_) => {
                self.counters.restriction_rejections += 1;
                if self.cfg.visibility_delay > 0.0 {
                    self.counters.deferred_drops += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::NodeProfile;

    fn profiles(n: u32, bw: f64, w: u32) -> Vec<NodeProfile> {
        (0..n)
            .map(|i| NodeProfile {
                id: NodeId(i),
                upload_bw: bw,
                w,
            })
            .collect()
    }

    fn small_cfg(n: u32) -> Config {
        Config {
            node_count: n,
            duration_blocks: 10,
            warmup_blocks: 2,
            delay_min: 0.05,
            delay_max: 0.05,
            ..Config::default()
        }
    }

    /// Two-node fixture: t100 must match the closed-form FIFO model.
    #[test]
    fn two_node_analytic_t100() {
        let mut cfg = small_cfg(4);
        cfg.initial_connections = 0;
        let mut sim = Simulation::new(cfg, Protocol::Contract, profiles(4, 1_000_000.0, 30));
        sim.ledger.register_contract(NodeId(0), NodeId(1), 0.0).unwrap();
        sim.on_contract_created(NodeId(0), NodeId(1), 0.0);
        let prop = sim.publish(NodeId(0), 1_000_000, DataKind::Block);
        // Stop before the first agent wakeup (30 s) can rewire the
        // topology; only node 1 is reachable until then.
        sim.run_until(20.0);
        let row = {
            sim.finalize();
            sim.prop_rows.iter().find(|r| r.id == prop).unwrap().clone()
        };
        // Serialization: header (34 B) + 2000 x 500 B at 1 MB/s, then one
        // link delay on the final part.
        let delay = 0.05;
        let expected = (34.0 + 2_000.0 * 500.0) / 1_000_000.0 + delay;
        // Node 1's completion is the 2nd of 4 nodes => t50 recorded.
        let t50 = row.t50.unwrap();
        let one_part = 500.0 / 1_000_000.0;
        assert!(
            (t50 - expected).abs() <= one_part,
            "t50 {t50} vs analytic {expected}"
        );
        assert_eq!(row.fraction, 0.5);
    }

    #[test]
    fn broadcast_conservation_small_network() {
        let mut cfg = small_cfg(8);
        cfg.initial_connections = 2;
        let mut sim = Simulation::new(cfg, Protocol::Contract, profiles(8, 500_000.0, 30));
        let prop = sim.publish(NodeId(0), 4_300, DataKind::Gossip);
        let done = sim.run_until_prop_done(prop, 3_000.0);
        if done {
            // Conservation checked inside complete_at_node via
            // nfhdp_counts; verify the row landed with full coverage.
            let row = sim.prop_rows.iter().find(|r| r.id == prop).unwrap();
            assert_eq!(row.fraction, 1.0);
            assert!(row.t50.unwrap() <= row.t90.unwrap());
            assert!(row.t90.unwrap() <= row.t100.unwrap());
        }
        assert_eq!(sim.counters.double_send_violations, 0);
    }

    #[test]
    fn determinism_same_seed_same_rows() {
        let run = || {
            let cfg = small_cfg(12);
            let mut sim = Simulation::new(cfg, Protocol::Contract, profiles(12, 200_000.0, 30));
            for k in 0..3 {
                sim.begin_interval(k);
                let t = k as f64 * 30.0;
                sim.schedule_publish(t + 0.1, NodeId(k % 12), 2_000, DataKind::Transaction);
                sim.run_until((k + 1) as f64 * 30.0);
            }
            sim.finalize();
            (
                sim.prop_rows
                    .iter()
                    .map(|r| (r.id, r.t100, r.duplicates))
                    .collect::<Vec<_>>(),
                sim.agent_rows.len(),
                sim.ledger.contracts().len(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bitswap_network_disseminates() {
        let cfg = small_cfg(10);
        let mut sim = Simulation::new(cfg, Protocol::Bitswap, profiles(10, 1_000_000.0, 30));
        sim.begin_interval(0);
        // Let connections age past the probabilistic-forward knee.
        sim.run_until(30.0);
        sim.begin_interval(1);
        sim.run_until(60.0);
        let prop = sim.publish(NodeId(3), 10_000, DataKind::Gossip);
        let done = sim.run_until_prop_done(prop, 3_000.0);
        assert!(done, "bitswap propagation should complete");
        assert!(sim.ledger.contracts().is_empty());
        assert!(sim.agent_rows.is_empty());
    }

    #[test]
    fn mutual_peer_rule_holds_throughout() {
        let mut cfg = small_cfg(20);
        cfg.duration_blocks = 20;
        cfg.warmup_blocks = 1;
        let mut sim = Simulation::new(cfg, Protocol::Contract, profiles(20, 300_000.0, 30));
        for k in 0..8u32 {
            sim.begin_interval(k);
            let t = k as f64 * 30.0;
            sim.schedule_publish(t, NodeId(k % 20), 50_000, DataKind::Block);
            sim.run_until((k + 1) as f64 * 30.0);
            assert!(!sim.ledger.has_triangle());
        }
        assert!(sim.ledger.contracts().len() >= 20);
    }
}
