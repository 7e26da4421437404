//! Pure computation of the protocol statistics: IPC, ND, SP, Grubbs
//! outlier filtering, expected first-heard counts, DI, FR and the window
//! average bandwidth.
//!
//! Everything here is scalar-type agnostic (`f32` or `f64` via
//! [`num_traits::Float`]); the t-distribution quantile behind the Grubbs
//! critical value is evaluated in `f64` and converted.

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::sync::OnceLock;

use num_traits::Float;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::types::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    /// A node with no peers has no IPC / FR.
    #[error("undefined peer count: node has no peers")]
    UndefinedPeerCount,
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(&'static str),
    #[error("grubbs critical value requires n >= 3, got {0}")]
    SampleTooSmall(usize),
}

fn f<F: Float>(x: f64) -> F {
    F::from(x).unwrap()
}

/// Index of Peer Coincidence: |SubPL_B \ PL_A| / PN_B.
pub fn compute_ipc<F: Float>(
    pl_a: &BTreeSet<NodeId>,
    subpl_b: &BTreeSet<NodeId>,
    pn_b: usize,
) -> Result<F, MetricsError> {
    if pn_b == 0 {
        return Err(MetricsError::UndefinedPeerCount);
    }
    let card = subpl_b.iter().filter(|n| !pl_a.contains(n)).count();
    Ok(f::<F>(card as f64) / f::<F>(pn_b as f64))
}

/// Network Distance: throughput of a 1 MB (1,000,000-byte) fetch, MB/s.
pub fn compute_nd<F: Float>(fetch_seconds: F) -> Result<F, MetricsError> {
    if fetch_seconds <= F::zero() {
        return Err(MetricsError::InvalidMeasurement("fetch time must be > 0"));
    }
    Ok(F::one() / fetch_seconds)
}

/// Structure Proportion: PN_B * IPC_{A,B} * (1 + ND_{A,B}).
pub fn compute_sp<F: Float>(pn_b: usize, ipc: F, nd: F) -> F {
    f::<F>(pn_b as f64) * ipc * (F::one() + nd)
}

/// One-sided Grubbs critical value at confidence `p` via the closed-form
/// t-distribution expression G(n) = ((n-1)/sqrt(n)) * sqrt(t^2/(n-2+t^2))
/// with t the upper alpha/n quantile of Student's t with n-2 df.
pub fn grubbs_critical(n: usize, p: f64) -> Result<f64, MetricsError> {
    if n < 3 {
        return Err(MetricsError::SampleTooSmall(n));
    }
    let alpha = 1.0 - p;
    let df = (n - 2) as f64;
    let t = StudentsT::new(0.0, 1.0, df)
        .expect("valid t distribution")
        .inverse_cdf(1.0 - alpha / n as f64);
    let nf = n as f64;
    Ok(((nf - 1.0) / nf.sqrt()) * (t * t / (nf - 2.0 + t * t)).sqrt())
}

/// Memoized `grubbs_critical(n, 0.95)`; the filter calls this in a hot loop.
fn critical_95(n: usize) -> f64 {
    static CACHE: OnceLock<Mutex<Vec<f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
    let mut cache = cache.lock().unwrap();
    if n >= 3 {
        while cache.len() < n - 2 {
            let k = cache.len() + 3;
            cache.push(grubbs_critical(k, 0.95).unwrap());
        }
        cache[n - 3]
    } else {
        unreachable!("filter never asks for n < 3")
    }
}

fn mean<F: Float>(xs: &[F]) -> F {
    xs.iter().fold(F::zero(), |a, &b| a + b) / f::<F>(xs.len() as f64)
}

/// Population standard deviation (divide by N), matching the protocol's
/// printed S formula rather than the classical N-1 form.
fn pop_stddev<F: Float>(xs: &[F], m: F) -> F {
    let ss = xs.iter().fold(F::zero(), |a, &b| a + (b - m) * (b - m));
    (ss / f::<F>(xs.len() as f64)).sqrt()
}

/// Grubbs criterion, steps (1)-(4): return inputs of size < 3 unchanged,
/// otherwise repeatedly strip the minimum, then the maximum, while the
/// statistic |mean - extreme| / S reaches the critical value at p = 0.95.
/// All-identical samples (S = 0) are returned unchanged. Output is sorted.
pub fn grubbs_filter<F: Float>(values: &[F]) -> Vec<F> {
    let mut xs: Vec<F> = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if xs.len() < 3 {
        return xs;
    }
    // step 2: minima
    while xs.len() >= 3 {
        let m = mean(&xs);
        let s = pop_stddev(&xs, m);
        if s <= F::zero() {
            return xs;
        }
        let crit = f::<F>(critical_95(xs.len()));
        if (m - xs[0]).abs() / s >= crit {
            xs.remove(0);
        } else {
            break;
        }
    }
    // step 3: maxima
    while xs.len() >= 3 {
        let m = mean(&xs);
        let s = pop_stddev(&xs, m);
        if s <= F::zero() {
            return xs;
        }
        let crit = f::<F>(critical_95(xs.len()));
        if (m - xs[xs.len() - 1]).abs() / s >= crit {
            xs.pop();
        } else {
            break;
        }
    }
    xs
}

/// Expected first-heard counts: for each peer, the Grubbs-filtered mean of
/// the first-heard counts of all peers whose SP lies within `t_width` of
/// its own. The ODP "array" is realized as this sparse window query.
pub fn compute_exp_nfhdp<F: Float>(stats: &[(F, u32)], t_width: F) -> Vec<F> {
    let mut out = Vec::with_capacity(stats.len());
    let mut window: Vec<F> = Vec::with_capacity(stats.len());
    for &(sp_i, _) in stats {
        window.clear();
        for &(sp_j, nfhdp_j) in stats {
            if (sp_j - sp_i).abs() <= t_width {
                window.push(f::<F>(nfhdp_j as f64));
            }
        }
        let kept = grubbs_filter(&window);
        out.push(mean(&kept));
    }
    out
}

fn clamped_sine<F: Float>(p: F) -> F {
    let half_pi = f::<F>(std::f64::consts::FRAC_PI_2);
    let cap = f::<F>(1.5 * std::f64::consts::PI);
    (p * half_pi).min(cap).sin()
}

/// Determine Index: sin(min(3pi/2, (NFHDC+1)/(ExpNFHDC+1) * pi/2)).
pub fn compute_di<F: Float>(nfhdc: u64, exp_nfhdc: F) -> F {
    let ratio = (f::<F>(nfhdc as f64) + F::one()) / (exp_nfhdc + F::one());
    clamped_sine(ratio)
}

/// One completed propagation inside an FR/AB window: header time (D1),
/// completion time (D2), size in bytes, and per-peer (NFHDP, ExpNFHDP).
#[derive(Debug, Clone)]
pub struct WindowEntry<F> {
    pub d1: F,
    pub d2: F,
    pub data_size: F,
    pub peer_counts: Vec<(NodeId, u32, F)>,
}

/// Fulfill Rate over a window: P sums (NFHDP+1)/(ExpNFHDP+1) over every
/// peer and propagation, divided by PN only, then the clamped sine.
pub fn compute_fr<F: Float>(entries: &[WindowEntry<F>], pn: usize) -> Result<F, MetricsError> {
    if pn == 0 {
        return Err(MetricsError::UndefinedPeerCount);
    }
    let mut p = F::zero();
    for e in entries {
        for &(_, nfhdp, exp) in &e.peer_counts {
            p = p + (f::<F>(nfhdp as f64) + F::one()) / (exp + F::one());
        }
    }
    Ok(clamped_sine(p / f::<F>(pn as f64)))
}

/// Window-average bandwidth in bytes/second: mean of size/(D2-D1).
/// Empty window (or all zero-duration entries) yields `None`; callers keep
/// their previous value. Zero-duration entries are skipped.
pub fn compute_ab<F: Float>(entries: &[WindowEntry<F>]) -> Option<F> {
    let mut sum = F::zero();
    let mut n = 0usize;
    for e in entries {
        let dt = e.d2 - e.d1;
        if dt > F::zero() {
            sum = sum + e.data_size / dt;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / f::<F>(n as f64))
    }
}
