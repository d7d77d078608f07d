use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fusejepa_core::train::{cli_probe, cli_profile, cli_train, Overrides};

#[derive(Parser)]
#[command(name = "fusejepa", version, about = "Train, probe and profile fusion-token JEPA encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the config's step count.
    #[arg(long, global = true)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised training; writes metrics.csv, val.csv and checkpoints.
    Train {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Frozen-encoder probes on a checkpoint; writes probe_metrics.csv.
    Probe {
        checkpoint: PathBuf,
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Counted training steps per routing mode; writes profile.csv.
    Profile {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            steps: self.steps,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, common } => {
            let summary = cli_train(&config, &common.overrides())
                .with_context(|| format!("training with {}", config.display()))?;
            if let (Some(first), Some(last)) = (summary.history.first(), summary.history.last()) {
                println!(
                    "trained {} steps: loss {:.6} -> {:.6}",
                    summary.history.len(),
                    first.loss_total,
                    last.loss_total
                );
            }
            println!("final checkpoint: {}", summary.final_checkpoint.display());
        }
        Command::Probe {
            checkpoint,
            config,
            common,
        } => {
            let m = cli_probe(&checkpoint, &config, &common.overrides())
                .with_context(|| format!("probing {}", checkpoint.display()))?;
            println!("seg mIoU {:.4}  depth MAE {:.4}", m.seg_miou, m.depth_mae);
        }
        Command::Profile { config, common } => {
            let path = cli_profile(&config, &common.overrides())
                .with_context(|| format!("profiling {}", config.display()))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
