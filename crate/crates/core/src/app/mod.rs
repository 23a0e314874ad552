//! Experiment plumbing shared by the command-line tool: run configuration,
//! checkpoints, the training loop, evaluation, ablation sweeps and the
//! gradient-check preset.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod sweep;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataConfig, RunConfig, SelectionMetric, TrainingConfig};
pub use gradcheck::{run_gradcheck, tiny_observations};
pub use sweep::{sweep, write_sweep_csv, SweepParam, SweepRow, SWEEP_SEEDS};
pub use train::{evaluate, train, EpochLog, TrainOutcome};
