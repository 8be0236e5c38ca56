//! Experiment harness: config files, checkpoints, CSV metrics, identity
//! verification suites, ablation sweeps, and SVG plotting.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod plot;
pub mod run;
pub mod verify;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use config::ExperimentConfig;
pub use run::RunDir;
