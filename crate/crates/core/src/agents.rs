//! Per-node tabular Q-learning controllers: Alice adjusts the peer set,
//! Bob gates incoming connection invitations.

use std::collections::HashMap;

use rand::Rng;

/// Discretized (FR, PN) agent state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentState {
    pub fr_bin: u8,
    pub pn_bin: u8,
}

/// FR in `bins` uniform bins over [-1, 1].
pub fn fr_bin(fr: f64, bins: u8) -> u8 {
    let clamped = fr.clamp(-1.0, 1.0);
    let idx = ((clamped + 1.0) / 2.0 * bins as f64) as i64;
    idx.min(bins as i64 - 1).max(0) as u8
}

/// Peer count in fixed bins {0},{1},{2},{3},{4-5},{6-8},{9-15},{16+}.
pub fn pn_bin(pn: usize) -> u8 {
    match pn {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 3,
        4..=5 => 4,
        6..=8 => 5,
        9..=15 => 6,
        _ => 7,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseAction {
    Add,
    Replace1,
    Replace2,
    Stay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TAdjust {
    /// ChangeT1: T += 0.25.
    Up,
    /// ChangeT2: T -= 0.25.
    Down,
    None,
}

/// Alice's composite action: one base action, optionally combined with a
/// T adjustment. 4 x 3 = 12 composites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AliceAction {
    pub base: BaseAction,
    pub t_adjust: TAdjust,
}

pub const ALICE_ACTIONS: [AliceAction; 12] = {
    let bases = [
        BaseAction::Add,
        BaseAction::Replace1,
        BaseAction::Replace2,
        BaseAction::Stay,
    ];
    let adjusts = [TAdjust::None, TAdjust::Up, TAdjust::Down];
    let mut out = [AliceAction {
        base: BaseAction::Add,
        t_adjust: TAdjust::None,
    }; 12];
    let mut i = 0;
    while i < 4 {
        let mut j = 0;
        while j < 3 {
            out[i * 3 + j] = AliceAction {
                base: bases[i],
                t_adjust: adjusts[j],
            };
            j += 1;
        }
        i += 1;
    }
    out
};

impl AliceAction {
    pub fn label(&self) -> String {
        let base = match self.base {
            BaseAction::Add => "add",
            BaseAction::Replace1 => "replace1",
            BaseAction::Replace2 => "replace2",
            BaseAction::Stay => "stay",
        };
        match self.t_adjust {
            TAdjust::Up => format!("{base}+t"),
            TAdjust::Down => format!("{base}-t"),
            TAdjust::None => base.to_string(),
        }
    }
}

pub const BOB_ACTIONS: [bool; 2] = [true, false]; // Allow, NotAllow

/// Tabular action-value map; unseen entries read as zero.
#[derive(Debug, Clone)]
pub struct QTable {
    table: HashMap<(AgentState, u8), f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub skipped_updates: u64,
}

impl QTable {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0);
        assert!((0.0..1.0).contains(&gamma));
        QTable {
            table: HashMap::new(),
            alpha,
            gamma,
            skipped_updates: 0,
        }
    }

    pub fn get(&self, s: AgentState, a: u8) -> f64 {
        self.table.get(&(s, a)).copied().unwrap_or(0.0)
    }

    pub fn max_value(&self, s: AgentState, n_actions: u8) -> f64 {
        (0..n_actions)
            .map(|a| self.get(s, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// One-step target: Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a)).
    /// Non-finite rewards are skipped and counted.
    pub fn update(&mut self, s: AgentState, a: u8, reward: f64, s_next: AgentState, n_actions: u8) {
        if !reward.is_finite() {
            self.skipped_updates += 1;
            return;
        }
        let target = reward + self.gamma * self.max_value(s_next, n_actions);
        let q = self.table.entry((s, a)).or_insert(0.0);
        *q += self.alpha * (target - *q);
    }

    /// Epsilon-greedy selection; greedy ties are broken uniformly at
    /// random so a fresh all-zero table acts as a uniform policy instead
    /// of privileging the lowest action index.
    pub fn select<R: Rng>(&self, s: AgentState, n_actions: u8, epsilon: f64, rng: &mut R) -> u8 {
        if rng.gen::<f64>() < epsilon {
            return rng.gen_range(0..n_actions);
        }
        let best_v = self.max_value(s, n_actions);
        let ties: Vec<u8> = (0..n_actions).filter(|&a| self.get(s, a) == best_v).collect();
        ties[rng.gen_range(0..ties.len())]
    }
}

/// Acceptance probability P(Accept|r) = min(1, exp(3r - 6)) with
/// r = (now - LT)/10 and LT = 0 for a never-connected inviter. The
/// `literal_r` flag runs the uncorrected r = (LT - now)/10 instead.
pub fn accept_probability(last_connect: Option<f64>, now: f64, literal_r: bool) -> f64 {
    let lt = last_connect.unwrap_or(0.0);
    let r = if literal_r {
        (lt - now) / 10.0
    } else {
        (now - lt) / 10.0
    };
    accept_probability_from_r(r)
}

pub fn accept_probability_from_r(r: f64) -> f64 {
    (3.0 * r - 6.0).exp().min(1.0)
}

/// Exploration rate with linear decay from `start` to `end` over the run.
pub fn epsilon_at(start: f64, end: f64, now: f64, duration: f64) -> f64 {
    if duration <= 0.0 {
        return start;
    }
    let frac = (now / duration).clamp(0.0, 1.0);
    start + (end - start) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(fr: u8, pn: u8) -> AgentState {
        AgentState {
            fr_bin: fr,
            pn_bin: pn,
        }
    }

    #[test]
    fn action_space_cardinality() {
        assert_eq!(ALICE_ACTIONS.len(), 12);
        let mut uniq: Vec<_> = ALICE_ACTIONS.to_vec();
        uniq.dedup();
        assert_eq!(uniq.len(), 12);
        assert_eq!(BOB_ACTIONS.len(), 2);
    }

    #[test]
    fn q_update_bellman_steps() {
        let mut q = QTable::new(0.1, 0.9);
        // All-zero table, r=1: Q becomes alpha * r.
        q.update(s(0, 0), 0, 1.0, s(1, 0), 12);
        assert!((q.get(s(0, 0), 0) - 0.1).abs() < 1e-15);
        // Zero residual leaves the entry unchanged.
        let mut q2 = QTable::new(0.1, 0.9);
        q2.update(s(0, 0), 1, 0.0, s(1, 0), 12);
        assert_eq!(q2.get(s(0, 0), 1), 0.0);
        // Q(s,a)=1, r=1, max next = 1: 1 + 0.1*(1 + 0.9 - 1) = 1.09.
        let mut q3 = QTable::new(0.1, 0.9);
        q3.update(s(2, 2), 3, 10.0, s(2, 2), 12); // Q(s,3) = 1.0
        assert!((q3.get(s(2, 2), 3) - 1.0).abs() < 1e-12);
        q3.update(s(2, 2), 3, 1.0, s(2, 2), 12);
        assert!((q3.get(s(2, 2), 3) - 1.09).abs() < 1e-12);
    }

    #[test]
    fn non_finite_reward_skipped() {
        let mut q = QTable::new(0.1, 0.9);
        q.update(s(0, 0), 0, f64::NAN, s(0, 0), 12);
        assert_eq!(q.get(s(0, 0), 0), 0.0);
        assert_eq!(q.skipped_updates, 1);
    }

    #[test]
    fn greedy_is_deterministic_with_frozen_table() {
        let mut q = QTable::new(0.5, 0.9);
        q.update(s(1, 1), 4, 2.0, s(1, 1), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(q.select(s(1, 1), 12, 0.0, &mut rng), 4);
        }
        // An all-zero table ties everywhere and samples the full range.
        let q0 = QTable::new(0.5, 0.9);
        let seen: std::collections::BTreeSet<u8> =
            (0..200).map(|_| q0.select(s(0, 0), 12, 0.0, &mut rng)).collect();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn accept_probability_checkpoints() {
        assert_eq!(accept_probability_from_r(2.0), 1.0);
        assert!((accept_probability_from_r(0.0) - (-6.0f64).exp()).abs() < 1e-12);
        assert!((accept_probability_from_r(1.0) - (-3.0f64).exp()).abs() < 1e-12);
        // Never-connected inviter at now=600: r = 60, certain accept.
        assert_eq!(accept_probability(None, 600.0, false), 1.0);
        // Literal formula keeps the probability pinned near e^-6.
        assert!(accept_probability(None, 600.0, true) < 1e-6);
    }

    #[test]
    fn bins() {
        assert_eq!(fr_bin(-1.0, 8), 0);
        assert_eq!(fr_bin(1.0, 8), 7);
        assert_eq!(fr_bin(0.0, 8), 4);
        assert_eq!(fr_bin(-0.01, 8), 3);
        assert_eq!(pn_bin(0), 0);
        assert_eq!(pn_bin(5), 4);
        assert_eq!(pn_bin(8), 5);
        assert_eq!(pn_bin(100), 7);
    }

    #[test]
    fn epsilon_decay() {
        assert_eq!(epsilon_at(0.1, 0.01, 0.0, 100.0), 0.1);
        assert!((epsilon_at(0.1, 0.01, 100.0, 100.0) - 0.01).abs() < 1e-12);
        let mid = epsilon_at(0.1, 0.01, 50.0, 100.0);
        assert!((mid - 0.055).abs() < 1e-12);
    }
}
