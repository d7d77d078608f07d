//! Multi-crop views with one spatial transform shared by both streams and
//! photometric jitter applied to RGB only.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::image::{Image, Rect};
use crate::rng::{derive_seed, rng_from, DetRng};
use crate::scene::SceneSample;

const MAX_CROP_TRIES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSpec {
    pub kind: ViewKind,
    /// Fraction of the source area.
    pub scale: (f64, f64),
    /// Width / height aspect range, sampled log-uniformly.
    pub ratio: (f64, f64),
    pub out_size: usize,
}

impl CropSpec {
    pub fn global(out_size: usize) -> Self {
        Self {
            kind: ViewKind::Global,
            scale: (0.4, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            out_size,
        }
    }

    pub fn local(out_size: usize) -> Self {
        Self {
            kind: ViewKind::Local,
            scale: (0.05, 0.4),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            out_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(invalid(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo < hi <= 1")));
        }
        if !(self.ratio.0 > 0.0 && self.ratio.0 <= self.ratio.1) || self.out_size == 0 {
            return Err(invalid("crop aspect range or output size invalid"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewConfig {
    pub global: CropSpec,
    pub local: CropSpec,
    pub n_global: usize,
    pub n_local: usize,
    pub photometric: bool,
    pub resize: ResizeMode,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global: CropSpec::global(64),
            local: CropSpec::local(32),
            n_global: 2,
            n_local: 4,
            photometric: true,
            resize: ResizeMode::Bilinear,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_global == 0 {
            return Err(invalid("at least one global view is required"));
        }
        self.global.validate()?;
        self.local.validate()
    }
}

/// Photometric draws for one RGB view; `None` fields are skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    /// brightness, contrast, saturation factors and hue rotation (turns)
    pub jitter: Option<[f32; 4]>,
    pub grayscale: bool,
    pub blur_sigma: Option<f32>,
    pub solarize: bool,
}

impl Photometric {
    pub const NONE: Photometric = Photometric {
        jitter: None,
        grayscale: false,
        blur_sigma: None,
        solarize: false,
    };
}

/// Spatial transform and RGB draws of one view, sampled once.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPlan {
    pub kind: ViewKind,
    pub rect: Rect,
    pub flip: bool,
    pub out_size: usize,
    pub photometric: Photometric,
}

/// Spatial record of one stream of a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub rect: Rect,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub kind: ViewKind,
    pub rgb: Image,
    pub companion: Image,
    pub rgb_crop: CropRecord,
    pub companion_crop: CropRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub globals: Vec<View>,
    pub locals: Vec<View>,
}

impl ViewSet {
    pub fn iter(&self) -> impl Iterator<Item = &View> {
        self.globals.iter().chain(&self.locals)
    }
}

fn sample_rect(rng: &mut DetRng, height: usize, width: usize, spec: &CropSpec) -> Result<Rect> {
    let area = (height * width) as f64;
    let (lr0, lr1) = (spec.ratio.0.ln(), spec.ratio.1.ln());
    for _ in 0..MAX_CROP_TRIES {
        let target = area * rng.random_range(spec.scale.0..=spec.scale.1);
        let ratio = if lr0 < lr1 { rng.random_range(lr0..lr1).exp() } else { spec.ratio.0 };
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        return Ok(Rect { x, y, w, h });
    }
    // Central crop with the aspect ratio clamped into range.
    if height == 0 || width == 0 {
        return Err(Error::DegenerateCrop(MAX_CROP_TRIES));
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < spec.ratio.0 {
        (width, ((width as f64 / spec.ratio.0).round() as usize).clamp(1, height))
    } else if in_ratio > spec.ratio.1 {
        (((height as f64 * spec.ratio.1).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    Ok(Rect {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
    })
}

fn sample_photometric(rng: &mut DetRng, kind: ViewKind, index: usize) -> Photometric {
    let jitter = rng.random_bool(0.8).then(|| {
        [
            rng.random_range(0.6..=1.4f32),
            rng.random_range(0.6..=1.4f32),
            rng.random_range(0.8..=1.2f32),
            rng.random_range(-0.1..=0.1f32),
        ]
    });
    let grayscale = rng.random_bool(0.2);
    let blur_p = match (kind, index) {
        (ViewKind::Global, 0) => 1.0,
        (ViewKind::Global, _) => 0.1,
        (ViewKind::Local, _) => 0.5,
    };
    let blur_sigma = rng.random_bool(blur_p).then(|| rng.random_range(0.1..=2.0f32));
    let solarize = kind == ViewKind::Global && index == 1 && rng.random_bool(0.2);
    Photometric {
        jitter,
        grayscale,
        blur_sigma,
        solarize,
    }
}

/// Draws the spatial transform and RGB augmentation of every view.
pub fn plan_views(height: usize, width: usize, cfg: &ViewConfig, seed: u64) -> Result<Vec<ViewPlan>> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(seed, &[0x5649]));
    let mut plans = Vec::with_capacity(cfg.n_global + cfg.n_local);
    let specs = std::iter::repeat_n(cfg.global, cfg.n_global)
        .enumerate()
        .chain(std::iter::repeat_n(cfg.local, cfg.n_local).enumerate());
    for (index, spec) in specs {
        let rect = sample_rect(&mut rng, height, width, &spec)?;
        let flip = rng.random_bool(0.5);
        let photometric = sample_photometric(&mut rng, spec.kind, index);
        plans.push(ViewPlan {
            kind: spec.kind,
            rect,
            flip,
            out_size: spec.out_size,
            photometric: if cfg.photometric { photometric } else { Photometric::NONE },
        });
    }
    Ok(plans)
}

/// Zero-ignoring area pooling of a sparse depth window.
pub fn pool_depth(crop: &Image, out_size: usize) -> Image {
    crop.pool_area(out_size, out_size, true)
}

/// Applies one plan to both streams.
pub fn render_view(sample: &SceneSample, plan: &ViewPlan, resize: ResizeMode) -> View {
    let spatial = |img: &Image| {
        let c = img.crop(plan.rect);
        if plan.flip {
            c.flip_horizontal()
        } else {
            c
        }
    };
    let rgb = spatial(&sample.rgb);
    let rgb = match resize {
        ResizeMode::Bilinear => rgb.resize_bilinear(plan.out_size, plan.out_size),
        ResizeMode::Nearest => rgb.resize_nearest(plan.out_size, plan.out_size),
    };
    let rgb = apply_photometric(&rgb, &plan.photometric);
    let companion = pool_depth(&spatial(&sample.companion), plan.out_size);
    let record = CropRecord {
        rect: plan.rect,
        flip: plan.flip,
    };
    View {
        kind: plan.kind,
        rgb,
        companion,
        rgb_crop: record,
        companion_crop: record,
    }
}

pub fn make_views(sample: &SceneSample, cfg: &ViewConfig, seed: u64) -> Result<ViewSet> {
    let plans = plan_views(sample.rgb.height, sample.rgb.width, cfg, seed)?;
    let mut set = ViewSet {
        globals: Vec::with_capacity(cfg.n_global),
        locals: Vec::with_capacity(cfg.n_local),
    };
    for plan in &plans {
        let v = render_view(sample, plan, cfg.resize);
        match plan.kind {
            ViewKind::Global => set.globals.push(v),
            ViewKind::Local => set.locals.push(v),
        }
    }
    Ok(set)
}

/// Unaugmented full-frame view resized to `out_size`.
pub fn clean_view(sample: &SceneSample, out_size: usize) -> View {
    let plan = ViewPlan {
        kind: ViewKind::Global,
        rect: Rect {
            x: 0,
            y: 0,
            w: sample.rgb.width,
            h: sample.rgb.height,
        },
        flip: false,
        out_size,
        photometric: Photometric::NONE,
    };
    render_view(sample, &plan, ResizeMode::Bilinear)
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn apply_photometric(img: &Image, p: &Photometric) -> Image {
    let mut out = img.clone();
    if let Some([b, c, s, h]) = p.jitter {
        for v in &mut out.data {
            *v = (*v * b).clamp(0.0, 1.0);
        }
        let n = (out.height * out.width) as f32;
        let mean = out.data.chunks_exact(3).map(luma).sum::<f32>() / n;
        for v in &mut out.data {
            *v = ((*v - mean) * c + mean).clamp(0.0, 1.0);
        }
        for px in out.data.chunks_exact_mut(3) {
            let y = luma(px);
            for v in px.iter_mut() {
                *v = ((*v - y) * s + y).clamp(0.0, 1.0);
            }
        }
        if h != 0.0 {
            let (sin, cos) = (h * std::f32::consts::TAU).sin_cos();
            for px in out.data.chunks_exact_mut(3) {
                // rotate chroma in YIQ
                let y = luma(px);
                let i = 0.596 * px[0] - 0.274 * px[1] - 0.322 * px[2];
                let q = 0.211 * px[0] - 0.523 * px[1] + 0.312 * px[2];
                let (i, q) = (i * cos - q * sin, i * sin + q * cos);
                px[0] = (y + 0.956 * i + 0.621 * q).clamp(0.0, 1.0);
                px[1] = (y - 0.272 * i - 0.647 * q).clamp(0.0, 1.0);
                px[2] = (y - 1.106 * i + 1.703 * q).clamp(0.0, 1.0);
            }
        }
    }
    if p.grayscale {
        for px in out.data.chunks_exact_mut(3) {
            let y = luma(px);
            px.fill(y);
        }
    }
    if let Some(sigma) = p.blur_sigma {
        // sigma is drawn for a 224-pixel frame
        out = gaussian_blur(&out, sigma * out.width as f32 / 224.0);
    }
    if p.solarize {
        for v in &mut out.data {
            if *v >= 0.5 {
                *v = 1.0 - *v;
            }
        }
    }
    out
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return img.clone();
    }
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &Image, horizontal: bool| {
        let mut dst = Image::zeros(src.height, src.width, src.channels);
        for y in 0..src.height {
            for x in 0..src.width {
                for c in 0..src.channels {
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y as isize, (x as isize + o).clamp(0, src.width as isize - 1))
                        } else {
                            ((y as isize + o).clamp(0, src.height as isize - 1), x as isize)
                        };
                        acc += w * src.at(yy as usize, xx as usize, c);
                    }
                    dst.set(y, x, c, acc.clamp(0.0, 1.0));
                }
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::gen_scene;

    #[test]
    fn streams_share_spatial_transform() {
        let s = gen_scene(1, 64);
        let set = make_views(&s, &ViewConfig::default(), 9).unwrap();
        assert_eq!(set.globals.len(), 2);
        assert_eq!(set.locals.len(), 4);
        for v in set.iter() {
            assert_eq!(v.rgb_crop, v.companion_crop);
        }
        assert_eq!(set.globals[0].rgb.height, 64);
        assert_eq!(set.locals[0].companion.width, 32);
    }

    #[test]
    fn identity_pipeline_without_photometric() {
        let s = gen_scene(2, 64);
        let cfg = ViewConfig {
            photometric: false,
            ..ViewConfig::default()
        };
        let plans = plan_views(64, 64, &cfg, 5).unwrap();
        let set = make_views(&s, &cfg, 5).unwrap();
        for (plan, v) in plans.iter().zip(set.iter()) {
            let mut c = s.rgb.crop(plan.rect);
            if plan.flip {
                c = c.flip_horizontal();
            }
            assert_eq!(v.rgb, c.resize_bilinear(plan.out_size, plan.out_size));
        }
    }

    #[test]
    fn zero_ignoring_pool() {
        let cell = Image::from_vec(2, 2, 1, vec![0.0, 0.0, 0.5, 0.5]);
        assert_eq!(pool_depth(&cell, 1).data, vec![0.5]);
        let zeros = Image::zeros(2, 2, 1);
        assert_eq!(pool_depth(&zeros, 1).data, vec![0.0]);
        let dense = Image::from_vec(2, 2, 1, vec![0.1, 0.2, 0.3, 0.6]);
        assert!((pool_depth(&dense, 1).data[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut cfg = ViewConfig::default();
        cfg.local.scale = (0.4, 0.05);
        assert!(cfg.validate().is_err());
        let cfg = ViewConfig {
            n_global: 0,
            ..ViewConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn photometric_stays_in_range() {
        let s = gen_scene(4, 64);
        for seed in 0..20 {
            let set = make_views(&s, &ViewConfig::default(), seed).unwrap();
            for v in set.iter() {
                assert!(v.rgb.min_value() >= 0.0 && v.rgb.max_value() <= 1.0);
            }
        }
    }
}
