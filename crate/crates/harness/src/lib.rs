//! Command-line harness: clip generation, training, evaluation, ablation
//! sweeps and the latency/FLOP benchmark.
//!
//! Every CSV the harness writes starts with a `fingerprint` column holding
//! [`config::ExperimentConfig::fingerprint`] of the config that produced the
//! row. Columns ending in `_ms` are wall-clock timings; all other columns are
//! reproduced bit-exactly by a rerun with the same config.

pub mod bench;
pub mod commands;
pub mod config;
pub mod run;
pub mod table;

pub use commands::{cmd_bench, cmd_eval, cmd_gen, cmd_sweep, cmd_train, Stage};
pub use config::{Axis, ExperimentConfig};
