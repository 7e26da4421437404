//! Deterministic desk-scale simulator of a contract-connection overlay
//! protocol for distributed ledgers.
//!
//! Nodes publish co-signed connection contracts to a global ledger, score
//! each other with outlier-robust first-heard statistics, and adjust their
//! peer sets with two tabular Q-learning controllers per node. Data is
//! disseminated in 500-byte parts over a staggered per-moment scheduler.
//! A Bitswap-style comparator runs on a mirror network with identical node
//! capacities and pairwise delays.
//!
//! The metric math in [`metrics`] is generic over the scalar type; the
//! simulation engine itself runs on [`Scalar`].

pub mod agents;
pub mod bitswap;
pub mod config;
pub mod dissemination;
pub mod harness;
pub mod ledger;
pub mod metrics;
pub mod simnet;
pub mod simulation;
pub mod types;

/// Scalar type used by the simulation engine and the CSV outputs.
pub type Scalar = f64;

pub use types::{DataKind, NodeId, PropId};
