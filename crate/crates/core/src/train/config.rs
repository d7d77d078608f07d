use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::probes::ProbeTrainConfig;
use crate::scene::{CompanionKind, DepthRenderConfig, SceneConfig, NUM_CLASSES};
use crate::sigreg::{DirectionPolicy, SigRegConfig};
use crate::views::{CropSpec, ResizeMode, ViewConfig};
use crate::vit::{EncoderConfig, RoutingMode};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// SIGReg + invariance on the joint-pass CLS embeddings.
    JointCls,
    /// SIGReg averaged over joint, RGB-only and companion-only passes.
    ThreePass,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::JointCls => "joint-cls",
            Objective::ThreePass => "three-pass",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint-cls" => Ok(Objective::JointCls),
            "three-pass" => Ok(Objective::ThreePass),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// Every tunable of a run. Serialized as flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub out_dir: PathBuf,

    pub image_size: usize,
    pub local_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub projector_dim: usize,
    pub routing: RoutingMode,

    pub n_global: usize,
    pub n_local: usize,
    pub photometric: bool,
    pub companion: CompanionKind,
    pub return_probability: f64,
    pub r_max: f64,
    pub dataset_size: usize,

    pub objective: Objective,
    pub lambda: f64,
    pub num_directions: usize,
    pub knots: usize,
    pub t_max: f64,
    pub direction_policy: DirectionPolicy,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,

    pub checkpoint_every: u64,
    pub validate_every: u64,
    pub val_size: usize,
    pub record_wall_time: bool,

    pub probe_epochs: usize,
    pub probe_batch: usize,
    pub probe_lr: f64,
    pub probe_lr_decay: f64,
    pub probe_train_size: usize,
    pub probe_val_size: usize,

    pub profile_modes: Vec<RoutingMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 16,
            out_dir: PathBuf::from("runs/default"),
            image_size: 64,
            local_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            projector_dim: crate::sigreg::DEFAULT_PROJECTION_DIM,
            routing: RoutingMode::Pruned,
            n_global: 2,
            n_local: 4,
            photometric: true,
            companion: CompanionKind::SparseDepth,
            return_probability: crate::scene::DEFAULT_RETURN_PROBABILITY,
            r_max: crate::scene::DEFAULT_R_MAX,
            dataset_size: 512,
            objective: Objective::JointCls,
            lambda: crate::sigreg::DEFAULT_LAMBDA,
            num_directions: crate::sigreg::DEFAULT_DIRECTIONS,
            knots: crate::sigreg::DEFAULT_KNOTS,
            t_max: crate::sigreg::DEFAULT_T_MAX,
            direction_policy: DirectionPolicy::ResamplePerStep,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weight_decay: adam.weight_decay,
            warmup_frac: 0.05,
            checkpoint_every: 500,
            validate_every: 100,
            val_size: 32,
            record_wall_time: true,
            probe_epochs: 5,
            probe_batch: 16,
            probe_lr: 1e-3,
            probe_lr_decay: 0.5,
            probe_train_size: 256,
            probe_val_size: 64,
            profile_modes: vec![RoutingMode::Pruned, RoutingMode::Persistent],
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

fn modes_text(modes: &[RoutingMode]) -> String {
    modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "image_size" => self.image_size = parse_value(key, v)?,
            "local_size" => self.local_size = parse_value(key, v)?,
            "patch_size" => self.patch_size = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "depth" => self.depth = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, v)?,
            "projector_dim" => self.projector_dim = parse_value(key, v)?,
            "routing" => self.routing = v.parse()?,
            "n_global" => self.n_global = parse_value(key, v)?,
            "n_local" => self.n_local = parse_value(key, v)?,
            "photometric" => self.photometric = parse_bool(key, v)?,
            "companion" => self.companion = v.parse()?,
            "return_probability" => self.return_probability = parse_value(key, v)?,
            "r_max" => self.r_max = parse_value(key, v)?,
            "dataset_size" => self.dataset_size = parse_value(key, v)?,
            "objective" => self.objective = v.parse()?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "num_directions" => self.num_directions = parse_value(key, v)?,
            "knots" => self.knots = parse_value(key, v)?,
            "t_max" => self.t_max = parse_value(key, v)?,
            "direction_policy" => self.direction_policy = v.parse()?,
            "lr" => self.lr = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "warmup_frac" => self.warmup_frac = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "validate_every" => self.validate_every = parse_value(key, v)?,
            "val_size" => self.val_size = parse_value(key, v)?,
            "record_wall_time" => self.record_wall_time = parse_bool(key, v)?,
            "probe_epochs" => self.probe_epochs = parse_value(key, v)?,
            "probe_batch" => self.probe_batch = parse_value(key, v)?,
            "probe_lr" => self.probe_lr = parse_value(key, v)?,
            "probe_lr_decay" => self.probe_lr_decay = parse_value(key, v)?,
            "probe_train_size" => self.probe_train_size = parse_value(key, v)?,
            "probe_val_size" => self.probe_val_size = parse_value(key, v)?,
            "profile_modes" => {
                self.profile_modes = v
                    .split(',')
                    .map(|m| m.trim().parse())
                    .collect::<Result<Vec<_>>>()?
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("image_size", self.image_size.to_string()),
            ("local_size", self.local_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("projector_dim", self.projector_dim.to_string()),
            ("routing", self.routing.as_str().to_string()),
            ("n_global", self.n_global.to_string()),
            ("n_local", self.n_local.to_string()),
            ("photometric", self.photometric.to_string()),
            ("companion", self.companion.as_str().to_string()),
            ("return_probability", self.return_probability.to_string()),
            ("r_max", self.r_max.to_string()),
            ("dataset_size", self.dataset_size.to_string()),
            ("objective", self.objective.as_str().to_string()),
            ("lambda", self.lambda.to_string()),
            ("num_directions", self.num_directions.to_string()),
            ("knots", self.knots.to_string()),
            ("t_max", self.t_max.to_string()),
            ("direction_policy", self.direction_policy.as_str().to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("validate_every", self.validate_every.to_string()),
            ("val_size", self.val_size.to_string()),
            ("record_wall_time", self.record_wall_time.to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
            ("probe_batch", self.probe_batch.to_string()),
            ("probe_lr", self.probe_lr.to_string()),
            ("probe_lr_decay", self.probe_lr_decay.to_string()),
            ("probe_train_size", self.probe_train_size.to_string()),
            ("probe_val_size", self.probe_val_size.to_string()),
            ("profile_modes", modes_text(&self.profile_modes)),
        ]
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.steps == 0 || self.dataset_size == 0 {
            return bad("steps and dataset_size must be positive".into());
        }
        if self.n_local > 0 && self.local_size % self.patch_size.max(1) != 0 {
            return bad(format!(
                "local_size {} is not a multiple of patch_size {}",
                self.local_size, self.patch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must be in [0, 1)".into());
        }
        if self.profile_modes.is_empty() {
            return bad("profile_modes must name at least one mode".into());
        }
        if self.probe_train_size == 0 || self.probe_val_size == 0 || self.val_size < 2 {
            return bad("probe splits must be non-empty and val_size at least 2".into());
        }
        self.encoder_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.sigreg_config()?;
        self.view_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scene_config().render.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.adamw_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            routing: self.routing,
            projector_dim: self.projector_dim,
            rgb_channels: 3,
            mod_channels: 1,
        }
    }

    pub fn sigreg_config(&self) -> Result<SigRegConfig> {
        SigRegConfig::new(
            self.lambda,
            self.num_directions,
            self.knots,
            self.t_max,
            self.projector_dim,
            self.direction_policy,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            global: CropSpec::global(self.image_size),
            local: CropSpec::local(self.local_size),
            n_global: self.n_global,
            n_local: self.n_local,
            photometric: self.photometric,
            resize: ResizeMode::Bilinear,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            size: self.image_size,
            render: DepthRenderConfig {
                r_max: self.r_max,
                return_probability: self.return_probability,
                seed: self.seed,
            },
            companion: self.companion,
        }
    }

    pub fn adamw_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn probe_config(&self) -> ProbeTrainConfig {
        ProbeTrainConfig {
            epochs: self.probe_epochs,
            batch_size: self.probe_batch,
            lr: self.probe_lr,
            lr_decay: self.probe_lr_decay,
            num_classes: NUM_CLASSES,
            r_max: self.r_max,
            seed: self.seed,
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
