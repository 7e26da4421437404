//! Run configuration: TOML-loadable, with desk-scale defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RlConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub epsilon_final: f64,
    pub t_initial: f64,
    pub t_max: f64,
    pub fr_bins: u8,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            alpha: 0.1,
            gamma: 0.9,
            epsilon: 0.1,
            epsilon_final: 0.01,
            t_initial: 5.0,
            t_max: 50.0,
            fr_bins: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    pub node_count: u32,
    /// Upload bandwidth range, bytes/second.
    pub bw_min: f64,
    pub bw_max: f64,
    /// Per-connection delay range, seconds.
    pub delay_min: f64,
    pub delay_max: f64,
    /// Seconds per block interval.
    pub block_interval: f64,
    /// Agent window range, whole seconds, drawn once per node.
    pub w_min: u32,
    pub w_max: u32,
    /// Connections each node initiates at genesis (contract network).
    pub initial_connections: u32,
    pub seed: u64,
    /// Overrides the derived exploration stream seed when set.
    pub explore_seed: Option<u64>,
    /// Run length in block intervals.
    pub duration_blocks: u32,
    /// Intervals before broadcast tests begin.
    pub warmup_blocks: u32,
    pub test_broadcast_count: u32,
    pub test_size: u64,
    pub block_size: u64,
    /// Transaction size range in bytes; kept below one part size.
    pub tx_min: u64,
    pub tx_max: u64,
    /// Ledger visibility delay in seconds (0 = immediate).
    pub visibility_delay: f64,
    /// Candidate-scan probe message size in bytes.
    pub probe_size: u64,
    /// Baseline peer cap; oldest connections evicted beyond it.
    pub bitswap_peer_cap: usize,
    /// Propagations stalled for this many block intervals are expired
    /// and recorded with their completion fraction.
    pub gc_intervals: u32,
    /// Use the uncorrected r = (LT - C)/10 acceptance formula, under
    /// which invitation-accept probabilities decay over time instead of
    /// recovering.
    pub literal_r_formula: bool,
    pub rl: RlConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            node_count: 200,
            bw_min: 50_000.0,
            bw_max: 5_000_000.0,
            delay_min: 0.010,
            delay_max: 0.600,
            block_interval: 30.0,
            w_min: 30,
            w_max: 60,
            initial_connections: 2,
            seed: 1,
            explore_seed: None,
            duration_blocks: 500,
            warmup_blocks: 300,
            test_broadcast_count: 30,
            test_size: 1_000_000,
            block_size: 1_000_000,
            tx_min: 200,
            tx_max: 400,
            visibility_delay: 0.0,
            probe_size: 10_000,
            bitswap_peer_cap: 40,
            gc_intervals: 10,
            literal_r_formula: false,
            rl: RlConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.node_count < 4 {
            return err("node_count must be at least 4");
        }
        if self.bw_min <= 0.0 || self.bw_max < self.bw_min {
            return err("bandwidth range must satisfy 0 < bw_min <= bw_max");
        }
        if self.delay_min < 0.0 || self.delay_max < self.delay_min {
            return err("delay range must satisfy 0 <= delay_min <= delay_max");
        }
        if self.w_min == 0 || self.w_max < self.w_min {
            return err("window range must satisfy 0 < w_min <= w_max");
        }
        if self.warmup_blocks >= self.duration_blocks {
            return err("warmup_blocks must be less than duration_blocks");
        }
        if self.test_size == 0 {
            return err("test_size must be at least 1 byte");
        }
        if self.gc_intervals == 0 {
            return err("gc_intervals must be at least 1");
        }
        if self.tx_min == 0 || self.tx_max < self.tx_min {
            return err("transaction size range must satisfy 0 < tx_min <= tx_max");
        }
        Ok(())
    }

    pub fn duration_seconds(&self) -> f64 {
        self.duration_blocks as f64 * self.block_interval
    }
}
