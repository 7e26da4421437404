//! Experiment orchestration: node profiles and workload from named seed
//! streams, the interval loop with interleaved broadcast tests, mirrored
//! protocol comparisons, contract-log replay, and output emission.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::config::Config;
use crate::ledger::{contract_log_events, Contract, Ledger, LedgerEvent};
use crate::simnet::{stream_rng, NodeProfile};
use crate::simulation::{AgentRow, PropRow, Protocol, Simulation};
use crate::types::{DataKind, NodeId, PropId};

/// Per-node capacities drawn from the dedicated profile stream, shared
/// verbatim by mirror networks.
pub fn make_profiles(cfg: &Config) -> Vec<NodeProfile> {
    let mut rng = stream_rng(cfg.seed, "profiles");
    (0..cfg.node_count)
        .map(|i| NodeProfile {
            id: NodeId(i),
            upload_bw: rng.gen_range(cfg.bw_min..=cfg.bw_max),
            w: rng.gen_range(cfg.w_min..=cfg.w_max),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadEvent {
    pub at: f64,
    pub node: NodeId,
    pub size: u64,
    pub kind: DataKind,
}

/// The full publish schedule plus the shared broadcast-test publisher
/// sequence. Identical across mirror networks by construction.
#[derive(Debug, Clone)]
pub struct Workload {
    /// One event list per block interval, time-sorted.
    pub intervals: Vec<Vec<WorkloadEvent>>,
    pub test_publishers: Vec<NodeId>,
}

/// Per interval: one random block producer, and 1-3 transactions from
/// every node at uniform offsets within the interval.
pub fn build_workload(cfg: &Config) -> Workload {
    let mut rng = stream_rng(cfg.seed, "workload");
    let n = cfg.node_count;
    let mut intervals = Vec::with_capacity(cfg.duration_blocks as usize);
    for k in 0..cfg.duration_blocks {
        let t0 = k as f64 * cfg.block_interval;
        let mut evs = Vec::new();
        let producer = NodeId(rng.gen_range(0..n));
        evs.push(WorkloadEvent {
            at: t0,
            node: producer,
            size: cfg.block_size,
            kind: DataKind::Block,
        });
        for node in 0..n {
            let count = rng.gen_range(1..=3u32);
            for _ in 0..count {
                evs.push(WorkloadEvent {
                    at: t0 + rng.gen_range(0.0..cfg.block_interval),
                    node: NodeId(node),
                    size: rng.gen_range(cfg.tx_min..=cfg.tx_max),
                    kind: DataKind::Transaction,
                });
            }
        }
        evs.sort_by(|a, b| a.at.total_cmp(&b.at).then(a.node.cmp(&b.node)));
        intervals.push(evs);
    }
    let mut trng = stream_rng(cfg.seed, "tests");
    let test_publishers = (0..cfg.test_broadcast_count)
        .map(|_| NodeId(trng.gen_range(0..n)))
        .collect();
    Workload {
        intervals,
        test_publishers,
    }
}

/// One post-warmup broadcast test outcome. Times are relative to publish.
#[derive(Debug, Clone)]
pub struct TestRow {
    pub index: u32,
    pub prop: PropId,
    pub publisher: NodeId,
    pub size: u64,
    pub t50: Option<f64>,
    pub t90: Option<f64>,
    pub t100: Option<f64>,
    pub fraction: f64,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub protocol: Protocol,
    pub profiles: Vec<NodeProfile>,
    pub prop_rows: Vec<PropRow>,
    pub agent_rows: Vec<AgentRow>,
    pub contracts_csv: String,
    pub test_rows: Vec<TestRow>,
    pub ledger_mutations: usize,
    pub double_send_violations: u64,
}

/// Drive one network through the configured intervals. Broadcast tests
/// start at the warmup boundary, one per interval, published alongside
/// the regular workload. A grace period lets the final tests land.
pub fn run_experiment(cfg: &Config, protocol: Protocol) -> ExperimentResult {
    let profiles = make_profiles(cfg);
    let workload = build_workload(cfg);
    run_experiment_with(cfg, protocol, profiles, &workload)
}

pub fn run_experiment_with(
    cfg: &Config,
    protocol: Protocol,
    profiles: Vec<NodeProfile>,
    workload: &Workload,
) -> ExperimentResult {
    let mut sim = Simulation::new(cfg.clone(), protocol, profiles.clone());
    let mut pending_tests: Vec<(u32, PropId, NodeId)> = Vec::new();
    for k in 0..cfg.duration_blocks {
        sim.begin_interval(k);
        for ev in &workload.intervals[k as usize] {
            sim.schedule_publish(ev.at, ev.node, ev.size, ev.kind);
        }
        if k >= cfg.warmup_blocks {
            let idx = k - cfg.warmup_blocks;
            if (idx as usize) < workload.test_publishers.len() {
                let publisher = workload.test_publishers[idx as usize];
                let pid = sim.publish(publisher, cfg.test_size, DataKind::Gossip);
                pending_tests.push((idx, pid, publisher));
            }
        }
        sim.run_until((k + 1) as f64 * cfg.block_interval);
    }
    // Grace: idle intervals until every test resolved (or expired by GC).
    let grace = cfg.gc_intervals.max(10) + 5;
    let mut k = cfg.duration_blocks;
    while k < cfg.duration_blocks + grace {
        let all_resolved = pending_tests
            .iter()
            .all(|&(_, pid, _)| sim.prop_rows.iter().any(|r| r.id == pid) || sim.done_props.contains(&pid));
        if all_resolved {
            break;
        }
        sim.begin_interval(k);
        sim.run_until((k + 1) as f64 * cfg.block_interval);
        k += 1;
    }
    sim.finalize();

    let test_rows = pending_tests
        .iter()
        .map(|&(index, pid, publisher)| {
            let row = sim
                .prop_rows
                .iter()
                .find(|r| r.id == pid)
                .expect("finalize emits every propagation");
            TestRow {
                index,
                prop: pid,
                publisher,
                size: row.size,
                t50: row.t50,
                t90: row.t90,
                t100: row.t100,
                fraction: row.fraction,
            }
        })
        .collect();

    ExperimentResult {
        protocol,
        profiles,
        prop_rows: sim.prop_rows.clone(),
        agent_rows: sim.agent_rows.clone(),
        contracts_csv: sim.ledger.export_csv(),
        test_rows,
        ledger_mutations: sim
            .ledger
            .contracts()
            .iter()
            .map(|c| 1 + usize::from(c.terminated_at.is_some()))
            .sum(),
        double_send_violations: sim.counters.double_send_violations,
    }
}

/// Run the two mirror networks sequentially over one shared workload.
pub fn run_comparison(cfg: &Config) -> (ExperimentResult, ExperimentResult) {
    let profiles = make_profiles(cfg);
    let workload = build_workload(cfg);
    let a = run_experiment_with(cfg, Protocol::Contract, profiles.clone(), &workload);
    let b = run_experiment_with(cfg, Protocol::Bitswap, profiles, &workload);
    (a, b)
}

// ---- summary statistics --------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub tests: usize,
    pub completed: usize,
    pub mean_t100: Option<f64>,
    pub stddev_t100: Option<f64>,
    pub min_t100: Option<f64>,
    pub max_t100: Option<f64>,
    pub degenerate: bool,
}

/// Mean/stddev/min/max over the completed tests' t100 values; population
/// standard deviation. All tests incomplete flags a degenerate run.
pub fn summarize(tests: &[TestRow]) -> SummaryStats {
    let t100: Vec<f64> = tests.iter().filter_map(|t| t.t100).collect();
    if t100.is_empty() {
        return SummaryStats {
            tests: tests.len(),
            completed: 0,
            mean_t100: None,
            stddev_t100: None,
            min_t100: None,
            max_t100: None,
            degenerate: true,
        };
    }
    let n = t100.len() as f64;
    let mean = t100.iter().sum::<f64>() / n;
    let var = t100.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    SummaryStats {
        tests: tests.len(),
        completed: t100.len(),
        mean_t100: Some(mean),
        stddev_t100: Some(var.sqrt()),
        min_t100: t100.iter().copied().reduce(f64::min),
        max_t100: t100.iter().copied().reduce(f64::max),
        degenerate: false,
    }
}

// ---- output emission -----------------------------------------------------

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn profiles_csv(profiles: &[NodeProfile]) -> String {
    let mut out = String::from("node,upload_bw,w\n");
    for p in profiles {
        let _ = writeln!(out, "{},{},{}", p.id, p.upload_bw, p.w);
    }
    out
}

pub fn propagations_csv(rows: &[PropRow]) -> String {
    let mut out = String::from("id,origin,kind,size,t50,t90,t100,duplicates,fraction\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.origin,
            r.kind,
            r.size,
            opt(r.t50),
            opt(r.t90),
            opt(r.t100),
            r.duplicates,
            r.fraction
        );
    }
    out
}

pub fn agents_csv(rows: &[AgentRow]) -> String {
    let mut out =
        String::from("node,window_end,fr,pn,t,ab,alice_action,bob_action,reward_alice,reward_bob\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.node,
            r.window_end,
            r.fr,
            r.pn,
            r.t_param,
            opt(r.ab),
            r.alice_action,
            r.bob_action,
            opt(r.reward_alice),
            opt(r.reward_bob)
        );
    }
    out
}

pub fn tests_csv(rows: &[TestRow]) -> String {
    let mut out = String::from("test,prop,publisher,size,t50,t90,t100,fraction\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.index,
            r.prop,
            r.publisher,
            r.size,
            opt(r.t50),
            opt(r.t90),
            opt(r.t100),
            r.fraction
        );
    }
    out
}

pub fn summary_csv(entries: &[(Protocol, SummaryStats)]) -> String {
    let mut out = String::from(
        "protocol,tests,completed,mean_t100,stddev_t100,min_t100,max_t100,degenerate\n",
    );
    for (p, s) in entries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.as_str(),
            s.tests,
            s.completed,
            opt(s.mean_t100),
            opt(s.stddev_t100),
            opt(s.min_t100),
            opt(s.max_t100),
            s.degenerate
        );
    }
    out
}

/// Per-test t100 series, one column per protocol; gnuplot-compatible.
pub fn figure7_dat(results: &[&ExperimentResult]) -> String {
    let mut out = String::from("# test");
    for r in results {
        let _ = write!(out, " t100_{}", r.protocol.as_str());
    }
    out.push('\n');
    let rows = results.iter().map(|r| r.test_rows.len()).max().unwrap_or(0);
    for i in 0..rows {
        let _ = write!(out, "{i}");
        for r in results {
            let v = r
                .test_rows
                .get(i)
                .and_then(|t| t.t100)
                .map_or("nan".to_string(), |x| x.to_string());
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

/// Distribution summary per protocol; gnuplot-compatible.
pub fn figure8_dat(entries: &[(Protocol, SummaryStats)]) -> String {
    let mut out = String::from("# protocol mean stddev min max\n");
    for (p, s) in entries {
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            p.as_str(),
            opt(s.mean_t100),
            opt(s.stddev_t100),
            opt(s.min_t100),
            opt(s.max_t100)
        );
    }
    out
}

/// Write the full per-protocol output set into `dir`.
pub fn write_outputs(dir: &Path, result: &ExperimentResult) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("profiles.csv"), profiles_csv(&result.profiles))?;
    std::fs::write(dir.join("contracts.csv"), &result.contracts_csv)?;
    std::fs::write(
        dir.join("propagations.csv"),
        propagations_csv(&result.prop_rows),
    )?;
    std::fs::write(dir.join("agents.csv"), agents_csv(&result.agent_rows))?;
    std::fs::write(dir.join("tests.csv"), tests_csv(&result.test_rows))?;
    let stats = summarize(&result.test_rows);
    std::fs::write(
        dir.join("summary.csv"),
        summary_csv(&[(result.protocol, stats.clone())]),
    )?;
    std::fs::write(dir.join("figure7.dat"), figure7_dat(&[result]))?;
    std::fs::write(
        dir.join("figure8.dat"),
        figure8_dat(&[(result.protocol, stats)]),
    )?;
    Ok(())
}

// ---- contract-log replay -------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed contract log at line {0}")]
    Malformed(usize),
    #[error("rule violation during replay: {0}")]
    Violation(String),
}

#[derive(Debug, Default)]
pub struct ReplayReport {
    pub mutations: usize,
    pub registrations: usize,
    pub terminations: usize,
    pub triangles_found: usize,
}

/// Parse the `contracts.csv` export format back into contract records.
pub fn parse_contract_log(csv: &str) -> Result<Vec<Contract>, ReplayError> {
    let mut out = Vec::new();
    for (lineno, line) in csv.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ReplayError::Malformed(lineno + 1));
        }
        let parse_u32 = |s: &str| s.parse::<u32>().map_err(|_| ReplayError::Malformed(lineno + 1));
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| ReplayError::Malformed(lineno + 1));
        let a = NodeId(parse_u32(fields[1])?);
        let b = NodeId(parse_u32(fields[2])?);
        let id = fields[0]
            .parse::<u64>()
            .map_err(|_| ReplayError::Malformed(lineno + 1))?;
        let created_at = parse_f(fields[3])?;
        let terminated_at = if fields[4].is_empty() {
            None
        } else {
            Some(parse_f(fields[4])?)
        };
        let terminated_by = if fields[5].is_empty() {
            None
        } else {
            Some(NodeId(parse_u32(fields[5])?))
        };
        out.push(Contract {
            id,
            a,
            b,
            endpoint_a: (String::new(), 0),
            endpoint_b: (String::new(), 0),
            created_at,
            terminated_at,
            terminated_by,
        });
    }
    Ok(out)
}

/// Re-execute a contract log from genesis, enforcing the mutual-peer rule
/// at every registration and checking the active graph for triangles
/// after every mutation.
pub fn replay_contract_log(contracts: &[Contract]) -> Result<ReplayReport, ReplayError> {
    let mut ledger = Ledger::new();
    let mut report = ReplayReport::default();
    for ev in contract_log_events(contracts) {
        match ev {
            LedgerEvent::Register { a, b, at } => {
                ledger
                    .register_contract(a, b, at)
                    .map_err(|e| ReplayError::Violation(e.to_string()))?;
                report.registrations += 1;
            }
            LedgerEvent::Terminate { a, b, by, at } => {
                let id = ledger
                    .active_contract_id(a, b)
                    .ok_or_else(|| ReplayError::Violation(format!("no active contract {a}-{b}")))?;
                ledger
                    .terminate_contract(id, by, at)
                    .map_err(|e| ReplayError::Violation(e.to_string()))?;
                report.terminations += 1;
            }
        }
        report.mutations += 1;
        if ledger.has_triangle() {
            report.triangles_found += 1;
        }
    }
    Ok(report)
}
