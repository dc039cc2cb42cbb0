//! Learned KV-cache eviction.
//!
//! A small MLP per KV head scores cached tokens from their key, value and
//! position; the scores define a Plackett-Luce distribution over rankings,
//! trained offline with leave-one-out REINFORCE against the future
//! attention each token receives, summed over every cache budget.
//!
//! Module map:
//! - [`trace`]: `KVTR` Q/K/V trace files, per-head views, manifests
//! - [`attention`]: causal attention rows and future importance
//! - [`nn`], [`checkpoint`]: MLP, AdamW, LR schedule, `KVPA` checkpoints
//! - [`policy`]: featurization, Gumbel-sort sampling, log-probabilities
//! - [`reward`]: per-budget and total eviction cost, oracle normalization
//! - [`trainer`]: per-head training loop
//! - [`heuristics`]: baseline rankers and the shared `rank_with`
//! - [`synth`]: planted-structure synthetic traces
//! - [`eval`]: cost curves, comparison tables, latency timing
//! - [`cli`]: the `kvp` command

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod heuristics;
pub mod nn;
pub mod par;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod synth;
pub mod trace;
pub mod trainer;

pub use error::{KvpError, Result};
