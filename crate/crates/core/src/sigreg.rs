//! Invariance and sketched isotropic Gaussian regularization objectives.
//!
//! SIGReg projects a batch of embeddings onto `K` unit directions and
//! compares the empirical characteristic function of each 1-D projection
//! with the standard-normal one, `exp(-t^2 / 2)`, at `T` fixed knots:
//!
//! ```text
//! c[k,j] = mean_n cos(t_j * w_k . z_n)
//! s[k,j] = mean_n sin(t_j * w_k . z_n)
//! L      = 1/K * sum_k sum_j w_j * ((c[k,j] - exp(-t_j^2/2))^2 + s[k,j]^2)
//! ```
//!
//! The cost is `B*K*d` multiply-adds for the projections plus a constant
//! number of units per `(n, k, j)` triple, i.e. `O(B K (T + d))`.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Error, Result};
use crate::grad::{Graph, Tensor, Var};
use crate::rng::{derive_seed, rng_from};

/// Default trade-off between SIGReg and invariance.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Default projection (embedding) dimension.
pub const DEFAULT_PROJECTION_DIM: usize = 16;
pub const DEFAULT_KNOTS: usize = 64;
pub const DEFAULT_T_MAX: f64 = 4.0;
pub const DEFAULT_DIRECTIONS: usize = 16;

/// How the direction sketch evolves across optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionPolicy {
    /// Fresh directions every step, seeded by `(seed, step)`.
    ResamplePerStep,
    /// One direction matrix for the whole run.
    Fixed,
}

impl FromStr for DirectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resample" => Ok(Self::ResamplePerStep),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::Config(format!("unknown direction policy `{other}`"))),
        }
    }
}

impl DirectionPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ResamplePerStep => "resample",
            Self::Fixed => "fixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigRegConfig {
    pub lambda: f64,
    pub num_directions: usize,
    pub knots: Vec<f64>,
    pub weights: Vec<f64>,
    pub dim: usize,
    pub policy: DirectionPolicy,
}

impl SigRegConfig {
    pub fn new(
        lambda: f64,
        num_directions: usize,
        num_knots: usize,
        t_max: f64,
        dim: usize,
        policy: DirectionPolicy,
    ) -> Result<Self> {
        let (knots, weights) = make_knots(num_knots, t_max)?;
        let cfg = Self {
            lambda,
            num_directions,
            knots,
            weights,
            dim,
            policy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_defaults(dim: usize) -> Self {
        Self::new(
            DEFAULT_LAMBDA,
            DEFAULT_DIRECTIONS,
            DEFAULT_KNOTS,
            DEFAULT_T_MAX,
            dim,
            DirectionPolicy::ResamplePerStep,
        )
        .expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.num_directions == 0 || self.dim == 0 {
            return Err(invalid("direction count and dimension must be positive"));
        }
        if self.knots.len() != self.weights.len() || self.knots.is_empty() {
            return Err(invalid("knots and weights must be non-empty and paired"));
        }
        if self.knots.windows(2).any(|w| w[1] <= w[0]) || self.knots[0] < 0.0 {
            return Err(invalid("knots must be non-negative and strictly increasing"));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(invalid("quadrature weights must be positive"));
        }
        Ok(())
    }

    pub fn num_knots(&self) -> usize {
        self.knots.len()
    }

    /// Seed of the direction matrix used at `step`.
    pub fn direction_seed(&self, run_seed: u64, step: u64) -> u64 {
        match self.policy {
            DirectionPolicy::ResamplePerStep => derive_seed(run_seed, &[0x5167, step]),
            DirectionPolicy::Fixed => derive_seed(run_seed, &[0x5167]),
        }
    }
}

/// `T` uniform knots on `(0, t_max]` with trapezoid weights rescaled to
/// sum to `t_max`.
pub fn make_knots(num_knots: usize, t_max: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if num_knots < 2 {
        return Err(invalid(format!("need at least 2 knots, got {num_knots}")));
    }
    if !(t_max > 0.0) {
        return Err(invalid(format!("t_max must be positive, got {t_max}")));
    }
    let h = t_max / num_knots as f64;
    let knots: Vec<f64> = (1..=num_knots).map(|j| j as f64 * h).collect();
    let mut weights = vec![h; num_knots];
    weights[0] = h / 2.0;
    weights[num_knots - 1] = h / 2.0;
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w *= t_max / total;
    }
    Ok((knots, weights))
}

/// `K` unit directions in `R^d`, stored row-major `K x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Directions {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Directions {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// `d x K` transpose, the right operand of the projection product.
    pub fn transposed(&self) -> Tensor {
        let mut t = vec![0.0; self.data.len()];
        for k in 0..self.count {
            for i in 0..self.dim {
                t[i * self.count + k] = self.data[k * self.dim + i];
            }
        }
        Tensor::new(vec![self.dim, self.count], t).expect("direction shape")
    }
}

/// Isotropic unit directions: standard-normal components, normalized.
pub fn sample_directions(count: usize, dim: usize, seed: u64) -> Result<Directions> {
    if count == 0 || dim == 0 {
        return Err(invalid("direction count and dimension must be positive"));
    }
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let row: Vec<f64> = loop {
            let r: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if r.iter().any(|v: &f64| *v != 0.0) {
                break r;
            }
        };
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Ok(Directions { count, dim, data })
}

/// SIGReg statistic of the `B x d` embedding matrix `z`.
pub fn sigreg_loss(g: &mut Graph, z: Var, dirs: &Directions, cfg: &SigRegConfig) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 {
        return Err(shape_err("sigreg_loss", format!("embeddings must be B x d, got {shape:?}")));
    }
    let (b, d) = (shape[0], shape[1]);
    if b < 2 {
        return Err(invalid(format!("sigreg needs at least 2 embeddings, got {b}")));
    }
    if dirs.dim != d {
        return Err(shape_err(
            "sigreg_loss",
            format!("directions have dimension {}, embeddings {d}", dirs.dim),
        ));
    }
    let k = dirs.count;
    let t = cfg.num_knots();
    g.scoped("sigreg", |g| {
        let wt = g.constant(dirs.transposed());
        let proj = g.matmul(z, wt)?; // B x K
        let proj = g.reshape(proj, &[b, k, 1])?;
        let proj = g.broadcast(proj, &[b, k, t])?;
        let knots = g.constant(Tensor::new(vec![1, 1, t], cfg.knots.clone())?);
        let knots = g.broadcast(knots, &[b, k, t])?;
        let arg = g.mul(proj, knots)?;

        let cos = g.cos(arg);
        let c_hat = g.mean(cos, Some(0))?; // K x T
        let sin = g.sin(arg);
        let s_hat = g.mean(sin, Some(0))?;

        let target: Vec<f64> = (0..k)
            .flat_map(|_| cfg.knots.iter().map(|&tj| (-tj * tj / 2.0).exp()))
            .collect();
        let target = g.constant(Tensor::new(vec![k, t], target)?);
        let dc = g.sub(c_hat, target)?;
        let dc2 = g.square(dc);
        let ds2 = g.square(s_hat);
        let err = g.add(dc2, ds2)?;
        let w: Vec<f64> = (0..k).flat_map(|_| cfg.weights.iter().copied()).collect();
        let w = g.constant(Tensor::new(vec![k, t], w)?);
        let weighted = g.mul(err, w)?;
        let total = g.sum(weighted, None)?;
        Ok(g.scale(total, 1.0 / k as f64))
    })
}

/// Projected embeddings of every view of a batch; each entry is `B x d`.
#[derive(Clone, Debug, Default)]
pub struct ViewBatch {
    pub globals: Vec<Var>,
    pub locals: Vec<Var>,
}

impl ViewBatch {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.globals.iter().chain(&self.locals).copied()
    }

    pub fn len(&self) -> usize {
        self.globals.len() + self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean squared distance of every view to the global-view center,
/// averaged over views and batch rows.
pub fn invariance_loss(g: &mut Graph, views: &ViewBatch) -> Result<Var> {
    if views.globals.is_empty() {
        return Err(invalid("invariance loss needs at least one global view"));
    }
    let shape = g.shape(views.globals[0]).to_vec();
    if shape.len() != 2 {
        return Err(shape_err("invariance_loss", format!("views must be B x d, got {shape:?}")));
    }
    for v in views.all() {
        if g.shape(v) != shape.as_slice() {
            return Err(shape_err(
                "invariance_loss",
                format!("{shape:?} vs {:?}", g.shape(v)),
            ));
        }
    }
    g.scoped("invariance", |g| {
        // g0 + mean(g_i - g0): the same center, and exactly g0 when all agree.
        let g0 = views.globals[0];
        let mut spread: Option<Var> = None;
        for &v in &views.globals[1..] {
            let d = g.sub(v, g0)?;
            spread = Some(match spread {
                None => d,
                Some(s) => g.add(s, d)?,
            });
        }
        let center = match spread {
            None => g0,
            Some(s) => {
                let s = g.scale(s, 1.0 / views.globals.len() as f64);
                g.add(g0, s)?
            }
        };
        let mut total: Option<Var> = None;
        for v in views.all() {
            let diff = g.sub(v, center)?;
            let sq = g.square(diff);
            let s = g.sum(sq, None)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        let total = total.expect("at least one view");
        Ok(g.scale(total, 1.0 / (views.len() * shape[0]) as f64))
    })
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub sigreg: Var,
    pub invariance: Var,
}

/// All views stacked along the batch axis.
pub fn stack_views(g: &mut Graph, views: &ViewBatch) -> Result<Var> {
    let all: Vec<Var> = views.all().collect();
    g.concat(&all, 0)
}

/// `lambda * SIGReg(stacked views) + (1 - lambda) * invariance`.
pub fn combined_loss(
    g: &mut Graph,
    views: &ViewBatch,
    dirs: &Directions,
    cfg: &SigRegConfig,
) -> Result<LossTerms> {
    let stacked = stack_views(g, views)?;
    let sigreg = sigreg_loss(g, stacked, dirs, cfg)?;
    let invariance = invariance_loss(g, views)?;
    let total = mix_terms(g, sigreg, invariance, cfg.lambda)?;
    Ok(LossTerms {
        total,
        sigreg,
        invariance,
    })
}

pub(crate) fn mix_terms(g: &mut Graph, sigreg: Var, invariance: Var, lambda: f64) -> Result<Var> {
    let a = g.scale(sigreg, lambda);
    let b = g.scale(invariance, 1.0 - lambda);
    g.add(a, b)
}

/// Mean of the SIGReg statistic over the joint, RGB-only and
/// companion-only embeddings, sharing one direction matrix.
pub fn three_pass_sigreg(
    g: &mut Graph,
    joint: Var,
    rgb: Var,
    companion: Var,
    dirs: &Directions,
    cfg: &SigRegConfig,
) -> Result<Var> {
    let shape = g.shape(joint).to_vec();
    if g.shape(rgb) != shape.as_slice() || g.shape(companion) != shape.as_slice() {
        return Err(shape_err(
            "three_pass_sigreg",
            format!(
                "{shape:?}, {:?}, {:?}",
                g.shape(rgb),
                g.shape(companion)
            ),
        ));
    }
    let l1 = sigreg_loss(g, joint, dirs, cfg)?;
    let l2 = sigreg_loss(g, rgb, dirs, cfg)?;
    let l3 = sigreg_loss(g, companion, dirs, cfg)?;
    // l1 + (l2 - l1)/3 + (l3 - l1)/3: the mean, and exactly l1 when all agree.
    let d2 = g.sub(l2, l1)?;
    let d3 = g.sub(l3, l1)?;
    let d = g.add(d2, d3)?;
    let d = g.scale(d, 1.0 / 3.0);
    g.add(l1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knots_on_unit_grid() {
        let (k, w) = make_knots(3, 3.0).unwrap();
        assert_eq!(k, vec![1.0, 2.0, 3.0]);
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-15);
        assert_eq!(w, vec![0.75, 1.5, 0.75]);
        assert!(make_knots(1, 3.0).is_err());
        assert!(make_knots(4, 0.0).is_err());
    }

    #[test]
    fn directions_are_unit_and_seeded() {
        let a = sample_directions(32, 5, 11).unwrap();
        for k in 0..32 {
            let n: f64 = a.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(a, sample_directions(32, 5, 11).unwrap());
        assert_ne!(a, sample_directions(32, 5, 12).unwrap());
        assert!(sample_directions(0, 3, 1).is_err());
    }

    #[test]
    fn rejects_single_row() {
        let cfg = SigRegConfig::with_defaults(4);
        let dirs = sample_directions(4, 4, 0).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![1, 4]));
        assert!(sigreg_loss(&mut g, z, &dirs, &cfg).is_err());
    }

    #[test]
    fn invariance_hand_values() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let nv = g.scale(v, -1.0);
        let views = ViewBatch {
            globals: vec![v, nv],
            locals: vec![],
        };
        let l = invariance_loss(&mut g, &views).unwrap();
        // center 0; (|v|^2 + |v|^2) / 2 = |v|^2
        assert!((g.value(l).item() - 5.25).abs() < 1e-15);

        let mut with_local = views.clone();
        let zero = g.constant(Tensor::zeros(vec![1, 3]));
        with_local.locals.push(zero);
        let l2 = invariance_loss(&mut g, &with_local).unwrap();
        assert!(g.value(l2).item() < g.value(l).item());

        assert!(invariance_loss(&mut g, &ViewBatch::default()).is_err());
    }

    #[test]
    fn identical_views_have_zero_invariance() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![2, 2], vec![0.3, 1.0, -4.0, 2.0]).unwrap());
        let views = ViewBatch {
            globals: vec![v, v],
            locals: vec![v, v, v],
        };
        let l = invariance_loss(&mut g, &views).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn combined_endpoints() {
        let dirs = sample_directions(8, 3, 5).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let b = g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap());
        let views = ViewBatch {
            globals: vec![a, b],
            locals: vec![a],
        };
        for lambda in [0.0, 1.0] {
            let mut cfg = SigRegConfig::with_defaults(3);
            cfg.lambda = lambda;
            let terms = combined_loss(&mut g, &views, &dirs, &cfg).unwrap();
            let expect = if lambda == 0.0 { terms.invariance } else { terms.sigreg };
            assert_eq!(g.value(terms.total).item(), g.value(expect).item());
        }
        assert_eq!(SigRegConfig::with_defaults(16).lambda, 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(SigRegConfig::new(1.5, 4, 8, 4.0, 3, DirectionPolicy::Fixed).is_err());
        assert!(SigRegConfig::new(0.5, 0, 8, 4.0, 3, DirectionPolicy::Fixed).is_err());
        let mut cfg = SigRegConfig::with_defaults(3);
        cfg.weights[3] = -1.0;
        assert!(cfg.validate().is_err());
        assert!("bogus".parse::<DirectionPolicy>().is_err());
    }

    #[test]
    fn fixed_policy_reuses_seed() {
        let mut cfg = SigRegConfig::with_defaults(4);
        assert_ne!(cfg.direction_seed(1, 0), cfg.direction_seed(1, 1));
        cfg.policy = DirectionPolicy::Fixed;
        assert_eq!(cfg.direction_seed(1, 0), cfg.direction_seed(1, 9));
    }
}
