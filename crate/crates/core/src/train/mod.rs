//! Optimizer, run configuration, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod log;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState, StepOutcome};
pub use checkpoint::Checkpoint;
pub use config::{Preset, TrainConfig};
pub use log::{EpochRow, MetricsLog};
pub use trainer::{evaluate, predict, train, Trainer};
