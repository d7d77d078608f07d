use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::load_checkpoint;
use super::config::RunConfig;
use super::trainer::{probe_encoder, RunSummary, Trainer};
use crate::error::Result;
use crate::probes::ProbeMetrics;
use crate::profiler::{profile_csv, profile_run};

/// Command-line flags shared by every subcommand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub steps: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        cfg.validate()
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

pub fn cli_train(config: &Path, overrides: &Overrides) -> Result<RunSummary> {
    let cfg = load_config(config, overrides)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_string())?;
    let out = cfg.out_dir.clone();
    Trainer::new(cfg)?.run(&out)
}

/// Trains probes on a checkpoint's frozen encoder and writes
/// `probe_metrics.csv`, one row per validation pass.
pub fn cli_probe(checkpoint: &Path, config: &Path, overrides: &Overrides) -> Result<ProbeMetrics> {
    let cfg = load_config(config, overrides)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let run = probe_encoder(&ckpt.params, &cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut f = fs::File::create(cfg.out_dir.join("probe_metrics.csv"))?;
    writeln!(f, "epoch,seg_miou,depth_mae")?;
    for (e, m) in run.history.iter().enumerate() {
        writeln!(f, "{},{},{}", e + 1, m.seg_miou, m.depth_mae)?;
    }
    Ok(*run.history.last().expect("at least one probe epoch"))
}

/// Profiles every routing mode listed in the config; writes `profile.csv`.
pub fn cli_profile(config: &Path, overrides: &Overrides) -> Result<PathBuf> {
    let cfg = load_config(config, overrides)?;
    let steps = cfg.steps.clamp(1, 2) as usize;
    let mut reports = Vec::new();
    for &mode in &cfg.profile_modes {
        let mut c = cfg.clone();
        c.routing = mode;
        reports.push(profile_run(&c, steps)?);
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("profile.csv");
    fs::write(&path, profile_csv(&cfg, &reports))?;
    Ok(path)
}
