//! Frozen-feature probes: a strictly linear segmentation head and a small
//! depth head, both reading the encoder's fusion grid.

use std::rc::Rc;

use rand::seq::SliceRandom;

use crate::error::{invalid, shape_err, Result};
use crate::grad::{BoolMask, Graph, ParamStore, Tensor, Var};
use crate::image::{bilinear_taps, Image};
use crate::optim::{step_decay, AdamW, AdamWConfig};
use crate::rng::{derive_seed, rng_from, trunc_normal};
use crate::vit::{encode, EncoderConfig, InputPass};

/// Depth-to-space factor of both probes.
pub const SHUFFLE: usize = 4;
/// Channels per output pixel after the depth probe's shuffle.
pub const DEPTH_HIDDEN: usize = 16;
const PROBE_INIT_STD: f64 = 0.02;

fn init_linear(store: &mut ParamStore, rng: &mut crate::rng::DetRng, name: &str, fan_in: usize, fan_out: usize) {
    let w = (0..fan_in * fan_out)
        .map(|_| trunc_normal(rng, PROBE_INIT_STD))
        .collect();
    store.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("sized"));
    store.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

/// Segmentation head weights: one `D -> C r^2` projection.
pub fn init_seg_probe(embed_dim: usize, num_classes: usize, seed: u64) -> ParamStore {
    let mut rng = rng_from(derive_seed(seed, &[0x5345]));
    let mut store = ParamStore::new();
    init_linear(&mut store, &mut rng, "seg.proj", embed_dim, num_classes * SHUFFLE * SHUFFLE);
    store
}

/// Depth head weights: `D -> 16 r^2`, 3x3 refinement, `1x1` head.
pub fn init_depth_probe(embed_dim: usize, seed: u64) -> ParamStore {
    let mut rng = rng_from(derive_seed(seed, &[0x4450]));
    let mut store = ParamStore::new();
    init_linear(&mut store, &mut rng, "depth.proj", embed_dim, DEPTH_HIDDEN * SHUFFLE * SHUFFLE);
    init_linear(&mut store, &mut rng, "depth.refine", 9 * DEPTH_HIDDEN, DEPTH_HIDDEN);
    init_linear(&mut store, &mut rng, "depth.head", DEPTH_HIDDEN, 1);
    store
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, b)
}

fn grid_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if s * s != n {
        return Err(shape_err("probe", format!("{n} tokens do not form a square grid")));
    }
    Ok(s)
}

/// Depth-to-space: `[B, s*s, C*r*r] -> [B, r*s, r*s, C]`, channel `c*r*r +
/// dy*r + dx` of cell `(y, x)` landing at pixel `(r*y + dy, r*x + dx)`.
pub fn pixel_shuffle(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] % (r * r) != 0 {
        return Err(shape_err("pixel_shuffle", format!("{s:?} with r = {r}")));
    }
    let (b, side, c) = (s[0], grid_side(s[1])?, s[2] / (r * r));
    let x = g.reshape(x, &[b, side, side, c, r, r])?;
    let x = g.permute(x, &[0, 1, 4, 2, 5, 3])?;
    g.reshape(x, &[b, side * r, side * r, c])
}

fn taps_matrix(src: usize, dst: usize) -> Tensor {
    let mut m = vec![0.0; src * dst];
    for (o, (i0, i1, t)) in bilinear_taps(src, dst).into_iter().enumerate() {
        m[i0 * dst + o] += 1.0 - t;
        m[i1 * dst + o] += t;
    }
    Tensor::new(vec![src, dst], m).expect("sized")
}

/// Separable bilinear resize of `[B, C, h, w]` to `[B, C, out, out]`.
pub fn resize_bilinear(g: &mut Graph, x: Var, out: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err("resize", format!("{s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    if h == out && w == out {
        return Ok(x);
    }
    let rx = g.constant(taps_matrix(w, out));
    let ry = g.constant(taps_matrix(h, out));
    let x = g.matmul(x, rx)?;
    let x = g.transpose(x)?;
    let x = g.matmul(x, ry)?;
    g.transpose(x)
}

/// Zero-padded 3x3 convolution of `[B, h, w, Cin]` via row gathering.
pub fn conv3x3(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err("conv3x3", format!("{s:?}")));
    }
    let (bn, h, wd, cin) = (s[0], s[1], s[2], s[3]);
    let cout = *g.shape(w).last().unwrap_or(&0);
    let mut index = Vec::with_capacity(bn * h * wd * 9);
    for bi in 0..bn {
        for y in 0..h {
            for xx in 0..wd {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xs) = (y as isize + dy, xx as isize + dx);
                        let inside = yy >= 0 && xs >= 0 && (yy as usize) < h && (xs as usize) < wd;
                        index.push(inside.then(|| (bi * h + yy as usize) * wd + xs as usize));
                    }
                }
            }
        }
    }
    let rows = g.reshape(x, &[bn * h * wd, cin])?;
    let cols = g.gather_rows(rows, Rc::from(index))?;
    let cols = g.reshape(cols, &[bn * h * wd, 9 * cin])?;
    let y = g.linear(cols, w, b)?;
    g.reshape(y, &[bn, h, wd, cout])
}

/// Class logits `[B, C, out, out]` from a fusion grid `[B, n, D]`.
pub fn seg_probe(g: &mut Graph, store: &ParamStore, grid: Var, out_size: usize) -> Result<Var> {
    g.scoped("seg_probe", |g| {
        let y = linear(g, store, grid, "seg.proj")?;
        let y = pixel_shuffle(g, y, SHUFFLE)?;
        let y = g.permute(y, &[0, 3, 1, 2])?;
        resize_bilinear(g, y, out_size)
    })
}

/// Normalized depth `[B, out, out]` from a fusion grid `[B, n, D]`.
pub fn depth_probe(g: &mut Graph, store: &ParamStore, grid: Var, out_size: usize) -> Result<Var> {
    g.scoped("depth_probe", |g| {
        let y = linear(g, store, grid, "depth.proj")?;
        let y = pixel_shuffle(g, y, SHUFFLE)?;
        let w = g.param(store, "depth.refine.w")?;
        let b = g.param(store, "depth.refine.b")?;
        let y = conv3x3(g, y, w, b)?;
        let y = g.gelu(y);
        let y = linear(g, store, y, "depth.head")?;
        let s = g.shape(y).to_vec();
        let y = g.reshape(y, &[s[0], 1, s[1], s[2]])?;
        let y = resize_bilinear(g, y, out_size)?;
        let y = g.softplus(y);
        g.reshape(y, &[s[0], out_size, out_size])
    })
}

/// Mean cross-entropy of logits `[B, C, H, W]` against row-major labels.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != b * hw {
        return Err(shape_err("seg_loss", format!("{} labels for {s:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(invalid(format!("label {bad} outside {c} classes")));
    }
    let x = g.reshape(logits, &[b, c, hw])?;
    let x = g.permute(x, &[0, 2, 1])?;
    let p = g.masked_softmax(x, &BoolMask::new(hw, c, true))?;
    let p = g.reshape(p, &[b * hw * c, 1])?;
    let index: Vec<Option<usize>> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Some(i * c + l as usize))
        .collect();
    let picked = g.gather_rows(p, Rc::from(index))?;
    let floor = g.constant(Tensor::full(vec![labels.len(), 1], 1e-12));
    let picked = g.add(picked, floor)?;
    let logp = g.ln(picked);
    let m = g.mean(logp, None)?;
    Ok(g.scale(m, -1.0))
}

/// Charbonnier (smooth L1) loss between predicted and target normalized depth.
pub fn depth_loss(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    let t = g.constant(Tensor::new(s, target.to_vec())?);
    let d = g.sub(pred, t)?;
    let d2 = g.square(d);
    let eps = g.constant(Tensor::full(g.shape(d2).to_vec(), 1e-6));
    let d2 = g.add(d2, eps)?;
    let r = g.sqrt(d2);
    g.mean(r, None)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeMetrics {
    pub seg_miou: f64,
    /// Meters.
    pub depth_mae: f64,
}

/// Per-class intersection and union counts over a split.
#[derive(Clone, Debug, PartialEq)]
pub struct SegConfusion {
    intersection: Vec<u64>,
    union: Vec<u64>,
    present: Vec<bool>,
}

impl SegConfusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            present: vec![false; num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], target: &[u8]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(shape_err("miou", format!("{} vs {} labels", pred.len(), target.len())));
        }
        let c = self.union.len();
        for (&p, &t) in pred.iter().zip(target) {
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(invalid(format!("label outside {c} classes")));
            }
            self.present[t] = true;
            if p == t {
                self.intersection[t] += 1;
                self.union[t] += 1;
            } else {
                self.union[t] += 1;
                self.union[p] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over classes present in the targets seen so far.
    pub fn miou(&self) -> Result<f64> {
        let classes: Vec<usize> = (0..self.union.len()).filter(|&k| self.present[k]).collect();
        if classes.is_empty() {
            return Err(invalid("mIoU of an empty target"));
        }
        let total: f64 = classes
            .iter()
            .map(|&k| self.intersection[k] as f64 / self.union[k] as f64)
            .sum();
        Ok(total / classes.len() as f64)
    }
}

pub fn seg_miou(pred: &[u8], target: &[u8], num_classes: usize) -> Result<f64> {
    let mut c = SegConfusion::new(num_classes);
    c.add(pred, target)?;
    c.miou()
}

/// Mean absolute error in meters of normalized depth maps.
pub fn depth_mae(pred: &[f64], target: &[f64], r_max: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err("mae", format!("{} vs {} pixels", pred.len(), target.len())));
    }
    if target.is_empty() {
        return Err(invalid("MAE of an empty target"));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / target.len() as f64 * r_max)
}

/// Frozen features and targets for one split.
#[derive(Clone, Debug)]
pub struct ProbeData {
    /// Fusion grids, `[n, D]` each.
    pub features: Vec<Tensor>,
    /// Row-major labels at `target_size`.
    pub seg: Vec<Vec<u8>>,
    /// Normalized depth at `target_size`.
    pub depth: Vec<Vec<f64>>,
    pub target_size: usize,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn embed_dim(&self) -> Result<usize> {
        self.features
            .first()
            .map(|f| f.shape()[1])
            .ok_or_else(|| invalid("empty probe split"))
    }
}

/// Final-layer fusion grids for paired images, computed in chunks of `batch`.
pub fn extract_features(
    store: &ParamStore,
    cfg: &EncoderConfig,
    rgb: &[Image],
    companion: &[Image],
    batch: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(rgb.len());
    for (r, c) in rgb.chunks(batch.max(1)).zip(companion.chunks(batch.max(1))) {
        let mut g = Graph::new();
        let enc = encode(&mut g, store, cfg, r, c, InputPass::Joint)?;
        let f = g.value(enc.fusion);
        let (n, d) = (f.shape()[1], f.shape()[2]);
        for chunk in f.data().chunks(n * d) {
            out.push(Tensor::new(vec![n, d], chunk.to_vec())?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch learning-rate factor.
    pub lr_decay: f64,
    pub num_classes: usize,
    pub r_max: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            lr_decay: 0.5,
            num_classes: crate::scene::NUM_CLASSES,
            r_max: crate::scene::DEFAULT_R_MAX,
            seed: 0,
        }
    }
}

/// Trained probe heads with the validation metrics recorded after each epoch.
#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub seg: ParamStore,
    pub depth: ParamStore,
    pub history: Vec<ProbeMetrics>,
}

fn stack(features: &[&Tensor]) -> Result<Tensor> {
    let (n, d) = (features[0].shape()[0], features[0].shape()[1]);
    let mut data = Vec::with_capacity(features.len() * n * d);
    for f in features {
        if f.shape() != [n, d] {
            return Err(shape_err("probe batch", format!("{:?} vs [{n}, {d}]", f.shape())));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![features.len(), n, d], data)
}

/// Trains both heads on `train`, validating on `val` after every epoch.
pub fn train_probes(train: &ProbeData, val: &ProbeData, cfg: &ProbeTrainConfig) -> Result<ProbeRun> {
    let d = train.embed_dim()?;
    if val.embed_dim()? != d {
        return Err(invalid("train and validation features differ in width"));
    }
    let mut seg = init_seg_probe(d, cfg.num_classes, cfg.seed);
    let mut depth = init_depth_probe(d, cfg.seed);
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut seg_opt = AdamW::new(opt_cfg);
    let mut depth_opt = AdamW::new(opt_cfg);
    let mut rng = rng_from(derive_seed(cfg.seed, &[0x5052]));
    let mut history = Vec::with_capacity(cfg.epochs);
    let out = train.target_size;
    for epoch in 0..cfg.epochs {
        let lr = step_decay(epoch, cfg.lr, cfg.lr_decay);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let feats: Vec<&Tensor> = idx.iter().map(|&i| &train.features[i]).collect();
            let x = stack(&feats)?;
            let labels: Vec<u8> = idx.iter().flat_map(|&i| train.seg[i].iter().copied()).collect();
            let target: Vec<f64> = idx.iter().flat_map(|&i| train.depth[i].iter().copied()).collect();

            let mut g = Graph::new();
            let grid = g.constant(x.clone());
            let logits = seg_probe(&mut g, &seg, grid, out)?;
            let loss = seg_loss(&mut g, logits, &labels)?;
            seg_opt.step(&mut seg, &g.backward(loss)?.into_param_grads(), lr)?;

            let mut g = Graph::new();
            let grid = g.constant(x);
            let pred = depth_probe(&mut g, &depth, grid, out)?;
            let loss = depth_loss(&mut g, pred, &target)?;
            depth_opt.step(&mut depth, &g.backward(loss)?.into_param_grads(), lr)?;
        }
        history.push(evaluate_probes(&seg, &depth, val, cfg)?);
    }
    Ok(ProbeRun { seg, depth, history })
}

/// Split-level mIoU and depth MAE of trained heads.
pub fn evaluate_probes(
    seg: &ParamStore,
    depth: &ParamStore,
    data: &ProbeData,
    cfg: &ProbeTrainConfig,
) -> Result<ProbeMetrics> {
    let out = data.target_size;
    let hw = out * out;
    let mut conf = SegConfusion::new(cfg.num_classes);
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let feats: Vec<&Tensor> = chunk.iter().map(|&i| &data.features[i]).collect();
        let x = stack(&feats)?;
        let mut g = Graph::new();
        let grid = g.constant(x);
        let logits = seg_probe(&mut g, seg, grid, out)?;
        let pred_depth = depth_probe(&mut g, depth, grid, out)?;
        let l = g.value(logits).data();
        let pd = g.value(pred_depth).data();
        let c = cfg.num_classes;
        for (k, &i) in chunk.iter().enumerate() {
            let base = k * c * hw;
            let pred: Vec<u8> = (0..hw)
                .map(|p| {
                    (0..c)
                        .max_by(|&a, &b| l[base + a * hw + p].total_cmp(&l[base + b * hw + p]))
                        .unwrap_or(0) as u8
                })
                .collect();
            conf.add(&pred, &data.seg[i])?;
            let t = &data.depth[i];
            abs_sum += pd[k * hw..(k + 1) * hw]
                .iter()
                .zip(t)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>();
            count += hw;
        }
    }
    if count == 0 {
        return Err(invalid("empty probe split"));
    }
    Ok(ProbeMetrics {
        seg_miou: conf.miou()?,
        depth_mae: abs_sum / count as f64 * cfg.r_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let t = [0u8, 1, 2, 3];
        assert_eq!(seg_miou(&t, &t, 4).unwrap(), 1.0);
        assert_eq!(seg_miou(&[1, 1], &[0, 0], 4).unwrap(), 0.0);
        assert!(seg_miou(&[], &[], 4).is_err());
        let target = [0.1, 0.5, 0.2];
        let pred: Vec<f64> = target.iter().map(|t| t + 0.1).collect();
        assert!((depth_mae(&pred, &target, 80.0).unwrap() - 8.0).abs() < 1e-9);
        assert_eq!(depth_mae(&target, &target, 80.0).unwrap(), 0.0);
    }

    #[test]
    fn shuffle_hand_block() {
        // one cell, C = 2, r = 4: channel c*16 + dy*4 + dx -> pixel (dy, dx, c)
        let c = 2;
        let data: Vec<f64> = (0..c * 16).map(|v| v as f64).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, c * 16], data).unwrap());
        let y = pixel_shuffle(&mut g, x, 4).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 2]);
        let v = g.value(y).data();
        for dy in 0..4 {
            for dx in 0..4 {
                for ch in 0..c {
                    assert_eq!(v[(dy * 4 + dx) * c + ch], (ch * 16 + dy * 4 + dx) as f64);
                }
            }
        }
    }

    #[test]
    fn output_sizes() {
        let d = 8;
        let seg = init_seg_probe(d, 4, 1);
        let depth = init_depth_probe(d, 1);
        let mut g = Graph::new();
        let grid = g.constant(Tensor::full(vec![2, 4, d], 0.3));
        let l = seg_probe(&mut g, &seg, grid, 8).unwrap();
        assert_eq!(g.shape(l), &[2, 4, 8, 8]);
        let p = depth_probe(&mut g, &depth, grid, 8).unwrap();
        assert_eq!(g.shape(p), &[2, 8, 8]);
        assert!(g.value(p).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_grid_gives_constant_depth() {
        let d = 8;
        let mut depth = init_depth_probe(d, 2);
        depth.insert("depth.head.b", Tensor::vector(vec![0.3]));
        let mut g = Graph::new();
        let grid = g.constant(Tensor::zeros(vec![1, 4, d]));
        let p = depth_probe(&mut g, &depth, grid, 8).unwrap();
        let expect = f64::from(0.3f32).exp().ln_1p();
        assert!(g.value(p).data().iter().all(|&x| (x - expect).abs() < 1e-12));
    }
}
