use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::save_checkpoint;
use super::config::{Objective, RunConfig};
use crate::error::{invalid, Error, Result};
use crate::grad::{Graph, ParamStore, Tensor};
use crate::image::Image;
use crate::optim::{cosine_warmup, AdamW};
use crate::probes::{extract_features, train_probes, ProbeData, ProbeRun};
use crate::rng::derive_seed;
use crate::scene::{Dataset, SceneSample};
use crate::sigreg::{
    combined_loss, invariance_loss, mix_terms, sample_directions, stack_views, three_pass_sigreg,
    LossTerms, SigRegConfig, ViewBatch,
};
use crate::views::{clean_view, make_views, ViewConfig, ViewSet};
use crate::vit::{encode, init_encoder, project, EncoderConfig, InputPass};

const STREAM_INIT: u64 = 0x494e;
const STREAM_TRAIN: u64 = 0x5452;
const STREAM_VAL: u64 = 0x5641;
const STREAM_VIEWS: u64 = 0x5657;
const STREAM_PROBE_TRAIN: u64 = 0x5054;
const STREAM_PROBE_VAL: u64 = 0x5056;

/// Scalars logged for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss_total: f64,
    pub loss_sigreg: f64,
    pub loss_inv: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl StepStats {
    fn finite(&self) -> bool {
        self.loss_total.is_finite() && self.loss_sigreg.is_finite() && self.loss_inv.is_finite()
    }
}

/// Outcome of a finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub history: Vec<StepStats>,
}

/// Fresh encoder weights for a run.
pub fn init_params(cfg: &RunConfig) -> Result<ParamStore> {
    init_encoder(&cfg.encoder_config(), derive_seed(cfg.seed, &[STREAM_INIT]))
}

/// Rejects parameter stores whose names or shapes differ from `cfg`'s encoder.
pub fn check_compatible(params: &ParamStore, cfg: &EncoderConfig) -> Result<()> {
    let expected = init_encoder(cfg, 0)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            None => return Err(Error::Config(format!("checkpoint lacks parameter {name}"))),
            Some(p) if p.shape() != t.shape() => {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, configuration expects {:?} (embed_dim {})",
                    p.shape(),
                    t.shape(),
                    cfg.embed_dim
                )))
            }
            _ => {}
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Config("checkpoint has parameters the configuration does not define".into()));
    }
    Ok(())
}

fn slot_images(sets: &[ViewSet], global: bool, slot: usize) -> (Vec<Image>, Vec<Image>) {
    sets.iter()
        .map(|s| {
            let v = if global { &s.globals[slot] } else { &s.locals[slot] };
            (v.rgb.clone(), v.companion.clone())
        })
        .unzip()
}

/// Projected CLS embeddings of every view under one input pass.
fn embed_views(
    g: &mut Graph,
    params: &ParamStore,
    enc: &EncoderConfig,
    sets: &[ViewSet],
    pass: InputPass,
) -> Result<ViewBatch> {
    let mut batch = ViewBatch::default();
    let (n_global, n_local) = (sets[0].globals.len(), sets[0].locals.len());
    for (global, count) in [(true, n_global), (false, n_local)] {
        for slot in 0..count {
            let (rgb, comp) = slot_images(sets, global, slot);
            let tag = if global { "global" } else { "local" };
            let z = g.scoped(tag, |g| -> Result<_> {
                let out = encode(g, params, enc, &rgb, &comp, pass)?;
                project(g, params, out.cls)
            })?;
            if global {
                batch.globals.push(z);
            } else {
                batch.locals.push(z);
            }
        }
    }
    Ok(batch)
}

/// Builds the objective of `cfg` over the given views.
pub fn objective_loss(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &RunConfig,
    sigreg: &SigRegConfig,
    sets: &[ViewSet],
    direction_seed: u64,
) -> Result<LossTerms> {
    if sets.is_empty() {
        return Err(invalid("empty batch"));
    }
    let enc = cfg.encoder_config();
    let dirs = sample_directions(sigreg.num_directions, sigreg.dim, direction_seed)?;
    match cfg.objective {
        Objective::JointCls => {
            let views = g.scoped("joint", |g| embed_views(g, params, &enc, sets, InputPass::Joint))?;
            g.scoped("loss", |g| combined_loss(g, &views, &dirs, sigreg))
        }
        Objective::ThreePass => {
            let joint = g.scoped("joint", |g| embed_views(g, params, &enc, sets, InputPass::Joint))?;
            let rgb = g.scoped("rgb", |g| embed_views(g, params, &enc, sets, InputPass::RgbOnly))?;
            let comp = g.scoped("mod", |g| embed_views(g, params, &enc, sets, InputPass::ModOnly))?;
            g.scoped("loss", |g| {
                let zj = stack_views(g, &joint)?;
                let zr = stack_views(g, &rgb)?;
                let zm = stack_views(g, &comp)?;
                let sig = three_pass_sigreg(g, zj, zr, zm, &dirs, sigreg)?;
                let inv = invariance_loss(g, &joint)?;
                let total = mix_terms(g, sig, inv, sigreg.lambda)?;
                Ok(LossTerms {
                    total,
                    sigreg: sig,
                    invariance: inv,
                })
            })
        }
    }
}

/// Single-threaded SSL trainer owning the weights and optimizer state.
pub struct Trainer {
    pub config: RunConfig,
    pub params: ParamStore,
    sigreg: SigRegConfig,
    views: ViewConfig,
    dataset: Dataset,
    val: Dataset,
    opt: AdamW,
    step: u64,
    last_good: ParamStore,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: RunConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        check_compatible(&params, &config.encoder_config())?;
        let scene = config.scene_config();
        Ok(Self {
            sigreg: config.sigreg_config()?,
            views: config.view_config(),
            dataset: Dataset::new(scene.clone(), derive_seed(config.seed, &[STREAM_TRAIN]), config.dataset_size),
            val: Dataset::new(scene, derive_seed(config.seed, &[STREAM_VAL]), config.val_size),
            opt: AdamW::new(config.adamw_config()),
            step: 0,
            last_good: params.clone(),
            params,
            config,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        cosine_warmup(step, self.config.steps, self.config.warmup_frac, self.config.lr)
    }

    /// Samples of global step `step`, walking epoch permutations in order.
    pub fn batch_samples(&self, step: u64) -> Result<Vec<SceneSample>> {
        let b = self.config.batch_size as u64;
        let len = self.dataset.len as u64;
        let mut out = Vec::with_capacity(b as usize);
        let mut order_epoch = u64::MAX;
        let mut order = Vec::new();
        for pos in step * b..(step + 1) * b {
            let epoch = pos / len;
            if epoch != order_epoch {
                order = self.dataset.epoch_order(epoch);
                order_epoch = epoch;
            }
            out.push(self.dataset.sample(order[(pos % len) as usize])?);
        }
        Ok(out)
    }

    pub fn batch_views(&self, step: u64) -> Result<Vec<ViewSet>> {
        self.batch_samples(step)?
            .iter()
            .enumerate()
            .map(|(slot, s)| {
                make_views(s, &self.views, derive_seed(self.config.seed, &[STREAM_VIEWS, step, slot as u64]))
            })
            .collect()
    }

    /// Forward and backward of the current step without updating weights.
    pub fn step_graph(&self) -> Result<(Graph, LossTerms)> {
        let sets = self.batch_views(self.step)?;
        let mut g = Graph::new();
        let seed = self.sigreg.direction_seed(self.config.seed, self.step);
        let terms = objective_loss(&mut g, &self.params, &self.config, &self.sigreg, &sets, seed)?;
        Ok((g, terms))
    }

    /// One optimizer step; also returns the step's graph for cost inspection.
    /// Non-finite losses or gradients leave the weights untouched.
    pub fn train_step_profiled(&mut self) -> Result<(StepStats, Graph)> {
        let started = Instant::now();
        let (g, terms) = self.step_graph()?;
        let lr = self.lr_at(self.step);
        let mut stats = StepStats {
            step: self.step,
            loss_total: g.value(terms.total).item(),
            loss_sigreg: g.value(terms.sigreg).item(),
            loss_inv: g.value(terms.invariance).item(),
            lr,
            wall_ms: 0,
        };
        if stats.finite() {
            let grads = g.backward(terms.total)?.into_param_grads();
            if grads.values().all(Tensor::all_finite) {
                self.last_good = self.params.clone();
                self.opt.step(&mut self.params, &grads, lr)?;
            } else {
                stats.loss_total = f64::NAN;
            }
        }
        if self.config.record_wall_time {
            stats.wall_ms = started.elapsed().as_millis() as u64;
        }
        self.step += 1;
        Ok((stats, g))
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        self.train_step_profiled().map(|(s, _)| s)
    }

    /// Loss terms on the fixed validation split with deterministic views.
    pub fn validate(&self) -> Result<(f64, f64, f64)> {
        let samples: Vec<SceneSample> = (0..self.val.len).map(|i| self.val.sample(i)).collect::<Result<_>>()?;
        let sets: Vec<ViewSet> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| make_views(s, &self.views, derive_seed(self.config.seed, &[STREAM_VAL, i as u64])))
            .collect::<Result<_>>()?;
        let mut g = Graph::new();
        let seed = derive_seed(self.config.seed, &[STREAM_VAL]);
        let t = objective_loss(&mut g, &self.params, &self.config, &self.sigreg, &sets, seed)?;
        Ok((g.value(t.total).item(), g.value(t.sigreg).item(), g.value(t.invariance).item()))
    }

    /// Runs the configured number of steps, writing `metrics.csv`,
    /// `val.csv` and checkpoints under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<RunSummary> {
        fs::create_dir_all(out_dir)?;
        let ckpt_dir = out_dir.join("checkpoints");
        let mut metrics = fs::File::create(out_dir.join("metrics.csv"))?;
        writeln!(metrics, "step,loss_total,loss_sigreg,loss_inv,lr,wall_ms")?;
        let mut val = fs::File::create(out_dir.join("val.csv"))?;
        writeln!(val, "step,loss_total,loss_sigreg,loss_inv")?;
        let mut history = Vec::with_capacity(self.config.steps as usize);
        while self.step < self.config.steps {
            let stats = self.train_step()?;
            writeln!(
                metrics,
                "{},{},{},{},{},{}",
                stats.step, stats.loss_total, stats.loss_sigreg, stats.loss_inv, stats.lr, stats.wall_ms
            )?;
            history.push(stats);
            if !stats.finite() {
                metrics.flush()?;
                let path = save_checkpoint(&ckpt_dir.join("last_good"), stats.step, &self.last_good, &self.config)?;
                return Err(Error::NonFiniteLoss {
                    step: stats.step as usize,
                    checkpoint: path,
                });
            }
            let done = self.step;
            if self.config.validate_every > 0 && done % self.config.validate_every == 0 {
                let (t, s, i) = self.validate()?;
                writeln!(val, "{done},{t},{s},{i}")?;
            }
            if self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0 && done < self.config.steps {
                save_checkpoint(&ckpt_dir.join(format!("step_{done:06}")), done, &self.params, &self.config)?;
            }
        }
        metrics.flush()?;
        let final_checkpoint = save_checkpoint(&ckpt_dir.join("final"), self.step, &self.params, &self.config)?;
        Ok(RunSummary {
            out_dir: out_dir.to_path_buf(),
            final_checkpoint,
            history,
        })
    }
}

/// Clean full-frame probe split: features of `params` plus targets.
pub fn probe_split(params: &ParamStore, cfg: &RunConfig, train: bool) -> Result<ProbeData> {
    let (stream, len) = if train {
        (STREAM_PROBE_TRAIN, cfg.probe_train_size)
    } else {
        (STREAM_PROBE_VAL, cfg.probe_val_size)
    };
    let ds = Dataset::new(cfg.scene_config(), derive_seed(cfg.seed, &[stream]), len);
    let size = cfg.image_size;
    let mut rgb = Vec::with_capacity(len);
    let mut comp = Vec::with_capacity(len);
    let mut seg = Vec::with_capacity(len);
    let mut depth = Vec::with_capacity(len);
    for i in 0..len {
        let s = ds.sample(i)?;
        let v = clean_view(&s, size);
        rgb.push(v.rgb);
        comp.push(v.companion);
        seg.push(s.seg.clone());
        depth.push(
            s.depth_dense
                .data
                .iter()
                .map(|&d| (d as f64 / cfg.r_max).min(1.0))
                .collect(),
        );
    }
    let features = extract_features(params, &cfg.encoder_config(), &rgb, &comp, cfg.probe_batch)?;
    Ok(ProbeData {
        features,
        seg,
        depth,
        target_size: size,
    })
}

/// Trains both probes on frozen features of `params`.
pub fn probe_encoder(params: &ParamStore, cfg: &RunConfig) -> Result<ProbeRun> {
    check_compatible(params, &cfg.encoder_config())?;
    let train = probe_split(params, cfg, true)?;
    let val = probe_split(params, cfg, false)?;
    train_probes(&train, &val, &cfg.probe_config())
}
