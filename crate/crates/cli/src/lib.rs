//! Config-driven experiment orchestration over the identification library:
//! generate benchmark datasets, train the four model families, score
//! checkpoints, and roll trajectories out for plotting. Commands are
//! idempotent given the same config and seed, and every run leaves a
//! manifest hashing its inputs.

pub mod build;
pub mod commands;
pub mod config;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_report, cmd_simulate, cmd_train, sha256_hex, RunPaths,
    SimMode,
};
pub use config::{ExperimentConfig, ModelKind, Preset, ResolvedConfig};
