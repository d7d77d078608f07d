use rand::Rng;

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::rng::{derive_seed, rng_from};

pub const DEFAULT_R_MAX: f64 = 80.0;
pub const DEFAULT_RETURN_PROBABILITY: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRenderConfig {
    pub r_max: f64,
    pub return_probability: f64,
    pub seed: u64,
}

impl Default for DepthRenderConfig {
    fn default() -> Self {
        Self {
            r_max: DEFAULT_R_MAX,
            return_probability: DEFAULT_RETURN_PROBABILITY,
            seed: 0,
        }
    }
}

impl DepthRenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(invalid(format!("r_max must be positive, got {}", self.r_max)));
        }
        if !(self.return_probability > 0.0 && self.return_probability <= 1.0) {
            return Err(invalid(format!(
                "return probability must be in (0, 1], got {}",
                self.return_probability
            )));
        }
        Ok(())
    }
}

/// One range return projected onto the pixel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthPoint {
    pub y: usize,
    pub x: usize,
    /// Meters.
    pub depth: f64,
}

/// Writes points farthest-first so nearer returns overwrite farther ones.
/// Values are `depth / r_max` clamped to `[0, 1]`; pixels without a return
/// stay 0.
pub fn render_sparse_depth(
    points: &[DepthPoint],
    height: usize,
    width: usize,
    cfg: &DepthRenderConfig,
) -> Result<Image> {
    cfg.validate()?;
    for p in points {
        if !(p.depth > 0.0 && p.depth.is_finite()) {
            return Err(invalid(format!("point depth must be positive, got {}", p.depth)));
        }
        if p.y >= height || p.x >= width {
            return Err(invalid(format!(
                "point ({}, {}) outside {height}x{width}",
                p.y, p.x
            )));
        }
    }
    let mut order: Vec<&DepthPoint> = points.iter().collect();
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    let mut out = Image::zeros(height, width, 1);
    for p in order {
        let v = (p.depth / cfg.r_max).clamp(0.0, 1.0);
        out.set(p.y, p.x, 0, v as f32);
    }
    Ok(out)
}

/// Bernoulli(return probability) returns per pixel of a dense depth map.
/// `stream` separates the draws of different scenes sharing `cfg.seed`.
pub fn sample_points(depth_dense: &Image, cfg: &DepthRenderConfig, stream: u64) -> Vec<DepthPoint> {
    let mut rng = rng_from(derive_seed(cfg.seed, &[0x5041, stream]));
    let mut pts = Vec::new();
    for y in 0..depth_dense.height {
        for x in 0..depth_dense.width {
            let keep = cfg.return_probability >= 1.0 || rng.random::<f64>() < cfg.return_probability;
            if keep {
                pts.push(DepthPoint {
                    y,
                    x,
                    depth: depth_dense.at(y, x, 0) as f64,
                });
            }
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(y: usize, x: usize, depth: f64) -> DepthPoint {
        DepthPoint { y, x, depth }
    }

    #[test]
    fn nearest_point_wins() {
        let cfg = DepthRenderConfig::default();
        for pts in [[pt(0, 0, 10.0), pt(0, 0, 30.0)], [pt(0, 0, 30.0), pt(0, 0, 10.0)]] {
            let m = render_sparse_depth(&pts, 2, 2, &cfg).unwrap();
            assert_eq!(m.at(0, 0, 0), 0.125);
            assert_eq!(m.at(1, 1, 0), 0.0);
        }
    }

    #[test]
    fn normalization_and_clamp() {
        let cfg = DepthRenderConfig::default();
        let m = render_sparse_depth(&[pt(0, 0, 40.0), pt(0, 1, 200.0)], 1, 2, &cfg).unwrap();
        assert_eq!(m.data, vec![0.5, 1.0]);
        let empty = render_sparse_depth(&[], 3, 3, &cfg).unwrap();
        assert!(empty.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_points() {
        let cfg = DepthRenderConfig::default();
        assert!(render_sparse_depth(&[pt(0, 0, 0.0)], 1, 1, &cfg).is_err());
        assert!(render_sparse_depth(&[pt(0, 0, -3.0)], 1, 1, &cfg).is_err());
        assert!(render_sparse_depth(&[pt(2, 0, 3.0)], 1, 1, &cfg).is_err());
    }

    #[test]
    fn full_return_probability() {
        let dense = Image::from_vec(2, 3, 1, vec![5.0; 6]);
        let cfg = DepthRenderConfig {
            return_probability: 1.0,
            ..DepthRenderConfig::default()
        };
        assert_eq!(sample_points(&dense, &cfg, 0).len(), 6);
    }
}
