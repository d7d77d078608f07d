//! Procedural paired scenes: RGB, dense and sparse depth, segmentation.

mod cache;
mod depth;

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

pub use cache::{load_sample, save_sample, CACHE_VERSION};
pub use depth::{
    render_sparse_depth, sample_points, DepthPoint, DepthRenderConfig, DEFAULT_RETURN_PROBABILITY,
    DEFAULT_R_MAX,
};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, rng_from, DetRng};

pub const BACKGROUND: u8 = 0;
pub const GROUND: u8 = 1;
pub const BOX: u8 = 2;
pub const DISK: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Nearest and farthest object depth in meters.
pub const OBJECT_DEPTH_RANGE: (f64, f64) = (2.0, 70.0);
/// Depth assigned to sky pixels.
pub const SKY_DEPTH: f64 = 80.0;

/// Second sensor stream paired with RGB.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompanionKind {
    SparseDepth,
    Thermal,
}

impl CompanionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CompanionKind::SparseDepth => "depth",
            CompanionKind::Thermal => "thermal",
        }
    }
}

impl FromStr for CompanionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(CompanionKind::SparseDepth),
            "thermal" => Ok(CompanionKind::Thermal),
            other => Err(Error::Config(format!("unknown companion `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Box,
    Disk,
}

impl Shape {
    pub fn class(self) -> u8 {
        match self {
            Shape::Box => BOX,
            Shape::Disk => DISK,
        }
    }
}

/// Placed object, kept for diagnostics. Coordinates in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: (f64, f64),
    pub extent: (f64, f64),
    pub depth: f64,
    pub color: [f32; 3],
}

impl SceneObject {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.center.1) / (self.extent.1 / 2.0);
        let dx = (x as f64 + 0.5 - self.center.0) / (self.extent.0 / 2.0);
        match self.shape {
            Shape::Box => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Shape::Disk => dx * dx + dy * dy <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub size: usize,
    pub rgb: Image,
    /// Meters, one channel.
    pub depth_dense: Image,
    /// Normalized returns in `[0, 1]`, 0 where no return.
    pub depth_sparse: Image,
    /// Stream fed to the companion stem.
    pub companion: Image,
    pub seg: Vec<u8>,
    pub objects: Vec<SceneObject>,
}

impl SceneSample {
    pub fn seg_at(&self, y: usize, x: usize) -> u8 {
        self.seg[y * self.size + x]
    }
}

/// Scene generation settings shared by a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub render: DepthRenderConfig,
    pub companion: CompanionKind,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            render: DepthRenderConfig::default(),
            companion: CompanionKind::SparseDepth,
        }
    }
}

/// Scene with default render settings and the sparse-depth companion.
pub fn gen_scene(seed: u64, size: usize) -> SceneSample {
    generate(
        seed,
        &SceneConfig {
            size,
            ..SceneConfig::default()
        },
    )
    .expect("default render config is valid")
}

fn jitter(rng: &mut DetRng, base: f32, amount: f32) -> f32 {
    (base + rng.random_range(-amount..=amount)).clamp(0.0, 1.0)
}

/// Deterministic scene from `seed`.
pub fn generate(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.render.validate()?;
    let s = cfg.size;
    if s < 8 {
        return Err(invalid(format!("scene size {s} too small")));
    }
    let mut rng = rng_from(derive_seed(seed, &[0x5343]));
    let sf = s as f64;
    let horizon = sf * rng.random_range(0.3..0.45);
    let (near, far) = OBJECT_DEPTH_RANGE;
    // ground depth falls off as k / (row - horizon + c): `far` at the
    // horizon row and `near` at the bottom row
    let span = sf - 1.0 - horizon;
    let c = near * span / (far - near);
    let k = far * c;
    let ground_depth = |y: f64| (k / (y - horizon + c)).clamp(near, SKY_DEPTH);
    let ground_row = |d: f64| horizon - c + k / d;

    let sky = [
        rng.random_range(0.45..0.65f32),
        rng.random_range(0.6..0.8f32),
        rng.random_range(0.8..0.95f32),
    ];
    let ground = [
        rng.random_range(0.25..0.45f32),
        rng.random_range(0.3..0.5f32),
        rng.random_range(0.2..0.35f32),
    ];

    let count = rng.random_range(3..=8);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = if rng.random_bool(0.5) { Shape::Box } else { Shape::Disk };
        let depth = rng.random_range(near..far);
        let height = (sf * rng.random_range(1.5..4.0) / depth).clamp(2.0, 0.6 * sf);
        let width = (height * rng.random_range(0.6..1.6)).clamp(2.0, 0.6 * sf);
        let base = ground_row(depth);
        let cx = rng.random_range(0.0..sf);
        let color = [
            rng.random_range(0.05..1.0f32),
            rng.random_range(0.05..1.0f32),
            rng.random_range(0.05..1.0f32),
        ];
        objects.push(SceneObject {
            shape,
            center: (cx, base - height / 2.0),
            extent: (width, height),
            depth,
            color,
        });
    }
    // far to near, so nearer objects overwrite
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut rgb = Image::zeros(s, s, 3);
    let mut dense = Image::zeros(s, s, 1);
    let mut seg = vec![BACKGROUND; s * s];
    for y in 0..s {
        let yc = y as f64 + 0.5;
        for x in 0..s {
            let (class, d, base, shade) = if yc < horizon {
                (BACKGROUND, SKY_DEPTH, sky, 1.0 - 0.3 * (yc / horizon) as f32)
            } else {
                let d = ground_depth(yc);
                (GROUND, d, ground, 0.6 + 0.4 * (1.0 - (d / far) as f32))
            };
            let mut px = [
                jitter(&mut rng, base[0] * shade, 0.02),
                jitter(&mut rng, base[1] * shade, 0.02),
                jitter(&mut rng, base[2] * shade, 0.02),
            ];
            let mut cls = class;
            let mut dd = d;
            for o in &objects {
                if o.covers(y, x) {
                    cls = o.shape.class();
                    dd = o.depth;
                    let fog = 1.0 - 0.5 * (o.depth / far) as f32;
                    px = [o.color[0] * fog, o.color[1] * fog, o.color[2] * fog];
                }
            }
            for (c, v) in px.iter().enumerate() {
                rgb.set(y, x, c, v.clamp(0.0, 1.0));
            }
            dense.set(y, x, 0, dd as f32);
            seg[y * s + x] = cls;
        }
    }

    let points = sample_points(&dense, &cfg.render, seed);
    let sparse = render_sparse_depth(&points, s, s, &cfg.render)?;
    let companion = match cfg.companion {
        CompanionKind::SparseDepth => sparse.clone(),
        CompanionKind::Thermal => thermal(&seg, &objects, s, seed),
    };
    Ok(SceneSample {
        seed,
        size: s,
        rgb,
        depth_dense: dense,
        depth_sparse: sparse,
        companion,
        seg,
        objects,
    })
}

/// Class emissivity for the thermal-like companion.
fn emissivity(class: u8) -> f32 {
    match class {
        BACKGROUND => 0.1,
        GROUND => 0.35,
        BOX => 0.7,
        _ => 0.9,
    }
}

/// Thermal-like intensity: class emissivity with per-object offsets and noise.
fn thermal(seg: &[u8], objects: &[SceneObject], size: usize, seed: u64) -> Image {
    let mut rng = rng_from(derive_seed(seed, &[0x5448]));
    let offsets: Vec<f32> = objects.iter().map(|_| rng.random_range(-0.1..0.1)).collect();
    let mut out = Image::zeros(size, size, 1);
    for y in 0..size {
        for x in 0..size {
            let class = seg[y * size + x];
            let mut v = emissivity(class);
            if class == BOX || class == DISK {
                // nearest covering object is the last one in far-to-near order
                if let Some(i) = objects.iter().rposition(|o| o.covers(y, x)) {
                    v += offsets[i];
                }
            }
            v += rng.random_range(-0.03..0.03);
            out.set(y, x, 0, v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Seed-indexed scene collection.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: SceneConfig,
    pub base_seed: u64,
    pub len: usize,
}

impl Dataset {
    pub fn new(config: SceneConfig, base_seed: u64, len: usize) -> Self {
        Self {
            config,
            base_seed,
            len,
        }
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        derive_seed(self.base_seed, &[index as u64])
    }

    pub fn sample(&self, index: usize) -> Result<SceneSample> {
        generate(self.sample_seed(index), &self.config)
    }

    /// Visiting order of one epoch, a pure function of `(epoch, base_seed)`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        let mut rng = rng_from(derive_seed(self.base_seed, &[0x4550, epoch]));
        order.shuffle(&mut rng);
        order
    }
}
