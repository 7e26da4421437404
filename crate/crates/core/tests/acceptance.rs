//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line. Derived expectations are computed by independent
//! oracles inside this file, not by the library under test.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use ccnet::agents::{accept_probability_from_r, AgentState, QTable, ALICE_ACTIONS};
use ccnet::config::Config;
use ccnet::dissemination::{part_count, schedule_moment, PropSend};
use ccnet::harness::{
    agents_csv, build_workload, make_profiles, profiles_csv, replay_contract_log,
    run_experiment_with, summarize, write_outputs, Workload, WorkloadEvent,
};
use ccnet::ledger::Ledger;
use ccnet::metrics::{compute_di, compute_ipc, grubbs_filter};
use ccnet::simulation::{Protocol, Simulation};
use ccnet::{DataKind, NodeId};

/// The two long-running criteria hold this lock so their time budgets are
/// measured with the CPU to themselves.
fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn check(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion:02} [{verdict}] {name}: {detail}");
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// ---- criterion 1: outlier-filter oracle equivalence ----------------------

/// Literal step-by-step re-implementation of the filter: sort, then strip
/// minima, then maxima, while |mean - extreme| / S (population) reaches
/// the one-sided critical value at 95%.
fn oracle_filter(values: &[f64]) -> Vec<f64> {
    fn critical(n: usize) -> f64 {
        let nf = n as f64;
        let t = StudentsT::new(0.0, 1.0, nf - 2.0)
            .unwrap()
            .inverse_cdf(1.0 - 0.05 / nf);
        ((nf - 1.0) / nf.sqrt()) * (t * t / (nf - 2.0 + t * t)).sqrt()
    }
    fn mean_s(xs: &[f64]) -> (f64, f64) {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let ss = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        (m, (ss / xs.len() as f64).sqrt())
    }
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    while xs.len() >= 3 {
        let (m, s) = mean_s(&xs);
        if s <= 0.0 || (m - xs[0]).abs() / s < critical(xs.len()) {
            break;
        }
        xs.remove(0);
    }
    while xs.len() >= 3 {
        let (m, s) = mean_s(&xs);
        if s <= 0.0 || (m - xs[xs.len() - 1]).abs() / s < critical(xs.len()) {
            break;
        }
        xs.pop();
    }
    xs
}

#[test]
fn criterion_01_outlier_filter_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE01);
    let mut mismatches = 0usize;
    for case in 0..1_000 {
        let n = rng.gen_range(0..=20usize);
        // Mix of tie-heavy integer grids and continuous draws.
        let values: Vec<f64> = if case % 2 == 0 {
            (0..n).map(|_| rng.gen_range(0..15) as f64).collect()
        } else {
            (0..n).map(|_| rng.gen_range(-10.0..50.0)).collect()
        };
        if grubbs_filter(&values) != oracle_filter(&values) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        1,
        "outlier filter oracle equivalence",
        mismatches == 0 && elapsed < 5.0,
        &format!("1000 multisets, {mismatches} mismatches, {elapsed:.2}s"),
    );
}

// ---- criterion 2: two-ring topology coincidence values -------------------

#[test]
fn criterion_02_two_ring_ipc_values() {
    // Two hubs (0 and 1), each with four peers, joined through shared
    // second-neighborhood nodes; built without the mutual-peer check as
    // the reference topology predates the rule.
    let edges: &[(u32, u32)] = &[
        (0, 2),
        (0, 3),
        (0, 4),
        (0, 5),
        (6, 3),
        (6, 5),
        (7, 2),
        (7, 8),
        (4, 8),
        (4, 10),
        (5, 9),
        (16, 14),
        (16, 10),
        (13, 4),
        (13, 5),
        (11, 5),
        (1, 11),
        (1, 13),
        (1, 12),
        (1, 14),
        (14, 17),
        (18, 14),
        (18, 12),
        (12, 15),
    ];
    let mut l = Ledger::new();
    for &(a, b) in edges {
        l.register_contract_unchecked(NodeId(a), NodeId(b), 0.0);
    }
    let (a, b) = (NodeId(0), NodeId(1));
    let ipc_ab: f64 = compute_ipc(&l.peers_of(a), &l.sub_pl(b), l.pn(b)).unwrap();
    let ipc_ba: f64 = compute_ipc(&l.peers_of(b), &l.sub_pl(a), l.pn(a)).unwrap();
    check(
        2,
        "two-ring topology IPC",
        ipc_ab == 1.0 && ipc_ba == 1.25,
        &format!("IPC fwd {ipc_ab} (want 1), IPC rev {ipc_ba} (want 1.25)"),
    );
}

// ---- criterion 3: staggered scheduler table ------------------------------

#[test]
fn criterion_03_stagger_table() {
    let peers: Vec<NodeId> = (1..=4).map(NodeId).collect();
    // 1-indexed reference table for 4 peers x 3 parts.
    let expect = [[1u32, 2, 3, 1], [2, 3, 1, 2], [3, 1, 2, 3]];
    let mut cells_ok = 0;
    for (m, row) in expect.iter().enumerate() {
        let got = schedule_moment(3, &peers, m as u32, |_, _| false);
        for (i, &(peer, part)) in got.iter().enumerate() {
            if peer == peers[i] && part + 1 == row[i] {
                cells_ok += 1;
            }
        }
    }
    // Header moment: every peer is offered the header before any part.
    let mut ps = PropSend::new(peers.clone(), 3);
    ps.enqueue_headers();
    ps.enqueue_all_moments(3);
    let headers_first = ps.header_queue.len() == 4 && ps.part_queue.len() == 12;
    check(
        3,
        "staggered moment table",
        cells_ok == 12 && headers_first,
        &format!("{cells_ok}/12 cells, header moment {headers_first}"),
    );
}

// ---- criterion 4: mutual-peer invariant at scale -------------------------

/// Blocks-only publish schedule: one block per interval, no transactions.
/// Keeps long invariant runs inside their time budget; ledger-mutation
/// behavior does not depend on traffic volume.
fn light_workload(cfg: &Config) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11AD);
    let intervals = (0..cfg.duration_blocks)
        .map(|k| {
            vec![WorkloadEvent {
                at: k as f64 * cfg.block_interval,
                node: NodeId(rng.gen_range(0..cfg.node_count)),
                size: cfg.block_size,
                kind: DataKind::Block,
            }]
        })
        .collect();
    let test_publishers = (0..cfg.test_broadcast_count)
        .map(|_| NodeId(rng.gen_range(0..cfg.node_count)))
        .collect();
    Workload {
        intervals,
        test_publishers,
    }
}

#[test]
fn criterion_04_mutual_peer_invariant_at_scale() {
    let _guard = heavy_lock();
    let start = Instant::now();
    let cfg = Config {
        node_count: 200,
        duration_blocks: 500,
        warmup_blocks: 499,
        test_broadcast_count: 0,
        block_size: 2_000,
        ..Config::default()
    };
    let profiles = make_profiles(&cfg);
    let workload = light_workload(&cfg);
    let result = run_experiment_with(&cfg, Protocol::Contract, profiles, &workload);
    // Replay the contract log from genesis: every registration re-checked
    // against the rule, triangle scan after every mutation.
    let report = replay_contract_log(
        &ccnet::harness::parse_contract_log(&result.contracts_csv).unwrap(),
    )
    .expect("no rule violation during replay");
    let elapsed = start.elapsed().as_secs_f64();
    check(
        4,
        "mutual-peer invariant at scale",
        report.mutations >= 1_000 && report.triangles_found == 0 && elapsed < 600.0,
        &format!(
            "{} mutations ({} reg, {} term), {} triangles, {elapsed:.1}s",
            report.mutations, report.registrations, report.terminations, report.triangles_found
        ),
    );
}

// ---- criterion 5: bounds suite -------------------------------------------

#[test]
fn criterion_05_bounds_suite() {
    let cfg = Config {
        node_count: 50,
        duration_blocks: 80,
        warmup_blocks: 79,
        block_size: 20_000,
        ..Config::default()
    };
    let profiles = make_profiles(&cfg);
    let mut sim = Simulation::new(cfg.clone(), Protocol::Contract, profiles);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut di_checked = 0usize;
    let mut di_ok = true;
    let mut t_ok = true;
    for k in 0..cfg.duration_blocks {
        sim.begin_interval(k);
        let t0 = k as f64 * cfg.block_interval;
        sim.schedule_publish(t0, NodeId(rng.gen_range(0..cfg.node_count)), 20_000, DataKind::Block);
        sim.run_until((k + 1) as f64 * cfg.block_interval);
        for node in &sim.nodes {
            for st in node.peer_stats.values() {
                let di: f64 = compute_di(st.nfhdc, st.exp_nfhdc);
                di_checked += 1;
                di_ok &= (-1.0..=1.0).contains(&di);
            }
            let steps = node.t_param / 0.25;
            t_ok &= node.t_param >= 0.0 && (steps - steps.round()).abs() < 1e-9;
        }
    }
    let fr_ok = sim
        .agent_rows
        .iter()
        .all(|r| (-1.0..=1.0).contains(&r.fr));
    let actions_ok = ALICE_ACTIONS.len() == 12;
    check(
        5,
        "bounds suite",
        di_ok && fr_ok && t_ok && actions_ok && di_checked > 1_000,
        &format!(
            "{di_checked} DI values in range {di_ok}, FR over {} windows {fr_ok}, T quantized {t_ok}, 12 actions {actions_ok}",
            sim.agent_rows.len()
        ),
    );
}

// ---- criterion 6: conservation suite -------------------------------------

#[test]
fn criterion_06_conservation_suite() {
    let cfg = Config {
        node_count: 30,
        duration_blocks: 30,
        warmup_blocks: 29,
        block_size: 20_000,
        ..Config::default()
    };
    let profiles = make_profiles(&cfg);
    let mut sim = Simulation::new(cfg.clone(), Protocol::Contract, profiles);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut records = 0usize;
    let mut conservation_ok = true;
    for k in 0..cfg.duration_blocks {
        sim.begin_interval(k);
        let t0 = k as f64 * cfg.block_interval;
        sim.schedule_publish(t0, NodeId(rng.gen_range(0..cfg.node_count)), 20_000, DataKind::Block);
        sim.schedule_publish(t0 + 3.0, NodeId(rng.gen_range(0..cfg.node_count)), 300, DataKind::Transaction);
        sim.run_until((k + 1) as f64 * cfg.block_interval);
        // Every completion record: per-peer first-heard counts sum to the
        // propagation's part count (each part attributed exactly once).
        for node in &sim.nodes {
            for rec in &node.completions {
                records += 1;
                let total: u32 = rec.per_peer.iter().map(|&(_, c, _)| c).sum();
                conservation_ok &= total == part_count(rec.size);
            }
        }
    }
    let no_double_sends = sim.counters.double_send_violations == 0;
    check(
        6,
        "conservation suite",
        conservation_ok && no_double_sends && records > 200,
        &format!(
            "{records} completion records conserve part counts {conservation_ok}, double-sends {}",
            sim.counters.double_send_violations
        ),
    );
}

// ---- criterion 7: determinism --------------------------------------------

#[test]
fn criterion_07_determinism() {
    let cfg = Config {
        node_count: 30,
        duration_blocks: 30,
        warmup_blocks: 20,
        test_broadcast_count: 5,
        test_size: 50_000,
        block_size: 20_000,
        ..Config::default()
    };
    let run = |cfg: &Config| {
        let profiles = make_profiles(cfg);
        let workload = build_workload(cfg);
        run_experiment_with(cfg, Protocol::Contract, profiles, &workload)
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    write_outputs(dir_a.path(), &run(&cfg)).unwrap();
    write_outputs(dir_b.path(), &run(&cfg)).unwrap();
    let files = [
        "profiles.csv",
        "contracts.csv",
        "propagations.csv",
        "agents.csv",
        "tests.csv",
        "summary.csv",
        "figure7.dat",
        "figure8.dat",
    ];
    let identical = files.iter().all(|f| {
        std::fs::read(dir_a.path().join(f)).unwrap() == std::fs::read(dir_b.path().join(f)).unwrap()
    });
    // Exploration stream only: decisions change, capacities do not.
    let explored = run(&Config {
        explore_seed: Some(0xDEC1DE),
        ..cfg.clone()
    });
    let base = run(&cfg);
    let agents_differ = agents_csv(&explored.agent_rows) != agents_csv(&base.agent_rows);
    let profiles_same = profiles_csv(&explored.profiles) == profiles_csv(&base.profiles);
    check(
        7,
        "determinism",
        identical && agents_differ && profiles_same,
        &format!(
            "identical dirs {identical}, exploration changes agent log {agents_differ}, profiles stable {profiles_same}"
        ),
    );
}

// ---- criterion 8: action-value update oracle -----------------------------

#[test]
fn criterion_08_q_update_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut q = QTable::new(0.1, 0.9);
    let mut shadow: std::collections::HashMap<(u8, u8, u8), f64> = Default::default();
    let mut max_err: f64 = 0.0;
    for _ in 0..100 {
        let s = AgentState {
            fr_bin: rng.gen_range(0..3),
            pn_bin: rng.gen_range(0..3),
        };
        let s2 = AgentState {
            fr_bin: rng.gen_range(0..3),
            pn_bin: rng.gen_range(0..3),
        };
        let a = rng.gen_range(0..12u8);
        let r = rng.gen_range(-5.0..5.0);
        // Hand-computed one-step target from the shadow table.
        let key = |st: AgentState, ac: u8| (st.fr_bin, st.pn_bin, ac);
        let max_next = (0..12)
            .map(|ac| shadow.get(&key(s2, ac)).copied().unwrap_or(0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        let prev = shadow.get(&key(s, a)).copied().unwrap_or(0.0);
        let expected = prev + 0.1 * (r + 0.9 * max_next - prev);
        shadow.insert(key(s, a), expected);
        q.update(s, a, r, s2, 12);
        max_err = max_err.max((q.get(s, a) - expected).abs());
    }
    check(
        8,
        "action-value update oracle",
        max_err <= 1e-12,
        &format!("100 randomized updates, max deviation {max_err:.2e}"),
    );
}

// ---- criterion 9: acceptance-probability checkpoints ---------------------

#[test]
fn criterion_09_accept_probability() {
    let at2 = accept_probability_from_r(2.0);
    let at0 = accept_probability_from_r(0.0);
    let exact = at2 == 1.0;
    let near = (at0 - (-6.0f64).exp()).abs() < 1e-9;
    let mut monotone = true;
    let mut prev = accept_probability_from_r(-5.0);
    let mut r = -5.0;
    while r <= 5.0 {
        let p = accept_probability_from_r(r);
        monotone &= p >= prev && (0.0..=1.0).contains(&p);
        prev = p;
        r += 0.01;
    }
    check(
        9,
        "acceptance probability checkpoints",
        exact && near && monotone,
        &format!("P(2)={at2}, P(0)={at0:.3e}, monotone {monotone}"),
    );
}

// ---- criterion 10: mirrored trend reproduction ---------------------------

#[test]
fn criterion_10_trend_reproduction() {
    let _guard = heavy_lock();
    let start = Instant::now();
    let mut all_pass = true;
    let mut details = Vec::new();
    for seed in [1u64, 2, 3] {
        // Constrained uplinks: the baseline's ~40-degree flooding pushes
        // per-node load past capacity while the ~6-degree contract overlay
        // stays comfortable; the stability gap needs that congestion.
        let cfg = Config {
            node_count: 200,
            duration_blocks: 75,
            warmup_blocks: 45,
            test_broadcast_count: 30,
            test_size: 100_000,
            block_size: 20_000,
            bw_min: 5_000.0,
            bw_max: 500_000.0,
            gc_intervals: 25,
            seed,
            ..Config::default()
        };
        let profiles = make_profiles(&cfg);
        let workload = light_workload(&cfg);
        let contract = run_experiment_with(&cfg, Protocol::Contract, profiles.clone(), &workload);
        let bitswap = run_experiment_with(&cfg, Protocol::Bitswap, profiles, &workload);
        let sc = summarize(&contract.test_rows);
        let sb = summarize(&bitswap.test_rows);
        let (mc, mb) = (sc.mean_t100.unwrap(), sb.mean_t100.unwrap());
        let (dc, db) = (sc.stddev_t100.unwrap(), sb.stddev_t100.unwrap());
        let ok = sc.completed == 30 && sb.completed == 30 && mc < mb && dc <= 0.8 * db;
        all_pass &= ok;
        details.push(format!(
            "seed {seed}: completed {}/{} mean {mc:.2}/{mb:.2}s stddev {dc:.2}/{db:.2}s {}",
            sc.completed,
            sb.completed,
            if ok { "ok" } else { "VIOLATED" }
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        10,
        "mirrored trend reproduction",
        all_pass && elapsed < 1_800.0,
        &format!("{} | {elapsed:.0}s", details.join(" | ")),
    );
}

// ---- criterion 11: two-node analytic oracle ------------------------------

#[test]
fn criterion_11_two_node_analytic() {
    // Two connected nodes plus two isolated spectators (engine minimum is
    // four); the only receiver's completion is the fixture's full-hearing
    // time, surfaced through the half-network threshold.
    let bw = 1_000_000.0;
    let delay = 0.05;
    let cfg = Config {
        node_count: 4,
        duration_blocks: 10,
        warmup_blocks: 2,
        initial_connections: 0,
        bw_min: bw,
        bw_max: bw,
        delay_min: delay,
        delay_max: delay,
        ..Config::default()
    };
    let profiles = make_profiles(&cfg);
    let mut sim = Simulation::new(cfg, Protocol::Contract, profiles);
    sim.ledger.register_contract(NodeId(0), NodeId(1), 0.0).unwrap();
    let prop = sim.publish(NodeId(0), 1_000_000, DataKind::Block);
    sim.run_until(120.0);
    sim.finalize();
    let row = sim.prop_rows.iter().find(|r| r.id == prop).unwrap();
    let simulated = row.t50.expect("receiver completes");
    // FIFO serialization: header + 2000 x 500-byte parts through a
    // 1 MB/s uplink, plus one link delay on the final arrival.
    let analytic = (34.0 + 2_000.0 * 500.0) / bw + delay;
    let one_part = 500.0 / bw;
    let err = (simulated - analytic).abs();
    check(
        11,
        "two-node analytic oracle",
        err <= one_part,
        &format!("simulated {simulated:.6}s vs analytic {analytic:.6}s, err {err:.6}s (tol {one_part:.6}s)"),
    );
}

// ---- cross-checks used by multiple criteria ------------------------------

#[test]
fn mirrored_networks_share_delays_and_profiles() {
    // Supporting check: the per-pair delay model is a pure function of the
    // seed, so mirror networks agree without any draw-order coupling.
    let cfg = Config {
        node_count: 12,
        duration_blocks: 10,
        warmup_blocks: 5,
        ..Config::default()
    };
    let profiles = make_profiles(&cfg);
    let a = Simulation::new(cfg.clone(), Protocol::Contract, profiles.clone());
    let b = Simulation::new(cfg, Protocol::Bitswap, profiles);
    let mut same = true;
    for i in 0..12u32 {
        for j in (i + 1)..12 {
            same &= a.delay(NodeId(i), NodeId(j)) == b.delay(NodeId(i), NodeId(j));
        }
    }
    assert!(same);
    let nodes_a: BTreeSet<u32> = a.profiles.iter().map(|p| p.id.0).collect();
    assert_eq!(nodes_a.len(), 12);
}
