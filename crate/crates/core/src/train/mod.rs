//! Run configuration, checkpoints, the SSL loop and the command entry points.

mod checkpoint;
mod cli;
mod config;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use cli::{cli_probe, cli_profile, cli_train, Overrides};
pub use config::{Objective, RunConfig};
pub use trainer::{
    check_compatible, init_params, objective_loss, probe_encoder, probe_split, RunSummary, StepStats,
    Trainer,
};
