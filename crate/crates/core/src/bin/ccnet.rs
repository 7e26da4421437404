//! Experiment CLI: full runs, mirrored protocol comparisons, contract-log
//! replay, and single-parameter sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ccnet::config::Config;
use ccnet::harness::{
    figure7_dat, figure8_dat, parse_contract_log, replay_contract_log, run_comparison,
    run_experiment, summarize, summary_csv, write_outputs, ExperimentResult,
};
use ccnet::simulation::Protocol;

#[derive(Parser)]
#[command(name = "ccnet", about = "Contract-connection overlay network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Contract,
    Bitswap,
    Both,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of nodes.
    #[arg(long)]
    nodes: Option<u32>,
    #[arg(long, value_enum, default_value = "contract")]
    protocol: ProtocolArg,
    /// Run length in block intervals.
    #[arg(long)]
    blocks: Option<u32>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Use the uncorrected r = (LT - C)/10 acceptance formula.
    #[arg(long)]
    literal_r: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Full experiment: workload, agents, broadcast tests, outputs.
    Run(RunArgs),
    /// Mirrored contract-vs-baseline comparison (implies --protocol both).
    Compare(RunArgs),
    /// Re-execute a contract log, enforcing the mutual-peer rule.
    Replay {
        /// Path to a contracts.csv export.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Grid over one config key: --param key=v1,v2,v3
    Sweep {
        #[arg(long)]
        param: String,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn load_config(args: &RunArgs) -> Result<Config, String> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p).map_err(|e| e.to_string())?,
        None => Config::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.nodes {
        cfg.node_count = n;
    }
    if let Some(b) = args.blocks {
        cfg.duration_blocks = b;
        // Keep the warmup fraction sane when shortening the run.
        if cfg.warmup_blocks >= b {
            cfg.warmup_blocks = b * 3 / 5;
        }
    }
    if args.literal_r {
        cfg.literal_r_formula = true;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn print_summary(r: &ExperimentResult) {
    let s = summarize(&r.test_rows);
    println!(
        "{}: {} tests, {} complete, mean t100 {}, stddev {}",
        r.protocol.as_str(),
        s.tests,
        s.completed,
        s.mean_t100.map_or("-".into(), |v| format!("{v:.3}s")),
        s.stddev_t100.map_or("-".into(), |v| format!("{v:.3}s")),
    );
}

fn run_single(cfg: &Config, protocol: Protocol, out: &PathBuf) -> Result<(), String> {
    let result = run_experiment(cfg, protocol);
    write_outputs(out, &result).map_err(|e| e.to_string())?;
    print_summary(&result);
    println!("outputs written to {}", out.display());
    Ok(())
}

fn run_both(cfg: &Config, out: &PathBuf) -> Result<(), String> {
    let (a, b) = run_comparison(cfg);
    write_outputs(&out.join("contract"), &a).map_err(|e| e.to_string())?;
    write_outputs(&out.join("bitswap"), &b).map_err(|e| e.to_string())?;
    let entries = [
        (Protocol::Contract, summarize(&a.test_rows)),
        (Protocol::Bitswap, summarize(&b.test_rows)),
    ];
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    std::fs::write(out.join("summary.csv"), summary_csv(&entries)).map_err(|e| e.to_string())?;
    std::fs::write(out.join("figure7.dat"), figure7_dat(&[&a, &b])).map_err(|e| e.to_string())?;
    std::fs::write(out.join("figure8.dat"), figure8_dat(&entries)).map_err(|e| e.to_string())?;
    print_summary(&a);
    print_summary(&b);
    println!("outputs written to {}", out.display());
    Ok(())
}

fn apply_param(cfg: &mut Config, key: &str, value: &str) -> Result<(), String> {
    let bad = |k: &str, v: &str| Err(format!("cannot parse {v} for {k}"));
    match key {
        "node_count" => match value.parse() {
            Ok(v) => cfg.node_count = v,
            Err(_) => return bad(key, value),
        },
        "seed" => match value.parse() {
            Ok(v) => cfg.seed = v,
            Err(_) => return bad(key, value),
        },
        "duration_blocks" => match value.parse() {
            Ok(v) => cfg.duration_blocks = v,
            Err(_) => return bad(key, value),
        },
        "warmup_blocks" => match value.parse() {
            Ok(v) => cfg.warmup_blocks = v,
            Err(_) => return bad(key, value),
        },
        "block_size" => match value.parse() {
            Ok(v) => cfg.block_size = v,
            Err(_) => return bad(key, value),
        },
        "test_size" => match value.parse() {
            Ok(v) => cfg.test_size = v,
            Err(_) => return bad(key, value),
        },
        "test_broadcast_count" => match value.parse() {
            Ok(v) => cfg.test_broadcast_count = v,
            Err(_) => return bad(key, value),
        },
        "bitswap_peer_cap" => match value.parse() {
            Ok(v) => cfg.bitswap_peer_cap = v,
            Err(_) => return bad(key, value),
        },
        "gc_intervals" => match value.parse() {
            Ok(v) => cfg.gc_intervals = v,
            Err(_) => return bad(key, value),
        },
        _ => return Err(format!("unsupported sweep key: {key}")),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => (|| {
            let cfg = load_config(&args)?;
            match args.protocol {
                ProtocolArg::Contract => run_single(&cfg, Protocol::Contract, &args.out),
                ProtocolArg::Bitswap => run_single(&cfg, Protocol::Bitswap, &args.out),
                ProtocolArg::Both => run_both(&cfg, &args.out),
            }
        })(),
        Command::Compare(args) => (|| {
            let cfg = load_config(&args)?;
            run_both(&cfg, &args.out)
        })(),
        Command::Replay { trace } => (|| {
            let csv = std::fs::read_to_string(&trace).map_err(|e| e.to_string())?;
            let contracts = parse_contract_log(&csv).map_err(|e| e.to_string())?;
            let report = replay_contract_log(&contracts).map_err(|e| e.to_string())?;
            println!(
                "replayed {} mutations ({} registrations, {} terminations), {} triangles",
                report.mutations, report.registrations, report.terminations, report.triangles_found
            );
            if report.triangles_found > 0 {
                return Err("active graph contained triangles during replay".into());
            }
            Ok(())
        })(),
        Command::Sweep { param, run } => (|| {
            let (key, values) = param
                .split_once('=')
                .ok_or_else(|| "expected --param key=v1,v2,...".to_string())?;
            for value in values.split(',') {
                let mut cfg = load_config(&run)?;
                apply_param(&mut cfg, key, value)?;
                cfg.validate().map_err(|e| e.to_string())?;
                let out = run.out.join(format!("{key}-{value}"));
                println!("--- {key} = {value} ---");
                match run.protocol {
                    ProtocolArg::Contract => run_single(&cfg, Protocol::Contract, &out)?,
                    ProtocolArg::Bitswap => run_single(&cfg, Protocol::Bitswap, &out)?,
                    ProtocolArg::Both => run_both(&cfg, &out)?,
                }
            }
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
