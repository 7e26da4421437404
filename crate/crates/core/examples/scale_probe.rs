//! Rough wall-clock scaling probe for the contract-protocol event loop.
//! Not part of the test suite; run with --release.

use std::time::Instant;

use ccnet::config::Config;
use ccnet::simulation::{Protocol, Simulation};
use ccnet::{DataKind, NodeId};

fn main() {
    for &blocks in &[50u32, 100, 200] {
        let cfg = Config {
            node_count: 200,
            duration_blocks: blocks,
            warmup_blocks: blocks - 1,
            block_size: 20_000,
            ..Config::default()
        };
        let profiles = ccnet::harness::make_profiles(&cfg);
        let start = Instant::now();
        let mut sim = Simulation::new(cfg.clone(), Protocol::Contract, profiles);
        for k in 0..blocks {
            sim.begin_interval(k);
            let t0 = k as f64 * cfg.block_interval;
            sim.schedule_publish(t0, NodeId(k % 200), cfg.block_size, DataKind::Block);
            sim.run_until((k + 1) as f64 * cfg.block_interval);
        }
        sim.finalize();
        let elapsed = start.elapsed().as_secs_f64();
        println!(
            "blocks {blocks:4}: {elapsed:7.2}s  events {:>11}  contracts {:>6}  props {:>5}",
            sim.queue.processed,
            sim.ledger.contracts().len(),
            sim.prop_rows.len()
        );
    }
}
