//! Multiply-add accounting for attention, SIGReg and whole training steps.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::grad::{Graph, OpCost};
use crate::train::{Objective, RunConfig, Trainer};
use crate::vit::RoutingMode;

/// SIGReg cost constants: `C1 * B*K*d` projection madds plus
/// `C2 * B*K*T` per-knot work (argument, cos, sin and two means).
pub const SIGREG_C1: u64 = 1;
pub const SIGREG_C2: u64 = 5;

/// Analytic attention work of one layer for one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    /// `Q K^T` plus `A V`: `2 T^2 D`.
    pub score_mix: u64,
    /// Q, K, V and output projections: `4 T D^2`.
    pub projection: u64,
}

impl AttentionCost {
    pub fn total(&self) -> u64 {
        self.score_mix + self.projection
    }
}

pub fn attention_cost(tokens: usize, dim: usize, heads: usize) -> Result<AttentionCost> {
    if tokens == 0 || dim == 0 || heads == 0 || dim % heads != 0 {
        return Err(invalid(format!(
            "attention cost needs tokens, dim, heads >= 1 with heads | dim (got {tokens}, {dim}, {heads})"
        )));
    }
    let (t, d) = (tokens as u64, dim as u64);
    Ok(AttentionCost {
        score_mix: 2 * t * t * d,
        projection: 4 * t * d * d,
    })
}

pub fn sigreg_cost(batch: usize, directions: usize, knots: usize, dim: usize) -> Result<u64> {
    if batch == 0 || directions == 0 || knots == 0 || dim == 0 {
        return Err(invalid("sigreg cost needs B, K, T, d >= 1"));
    }
    let (b, k, t, d) = (batch as u64, directions as u64, knots as u64, dim as u64);
    Ok(SIGREG_C1 * b * k * d + SIGREG_C2 * b * k * t)
}

/// Layer-0 work when CAM/MOD query rows are skipped (only CLS and fusion
/// rows survive pruning): queries `1+N`, keys `1+3N`.
pub fn minimal_first_layer_cost(n: usize, dim: usize) -> u64 {
    let (q, k, d) = (1 + n as u64, 1 + 3 * n as u64, dim as u64);
    2 * q * k * d + 2 * (q + k) * d * d
}

/// Per-layer line of a report. Measured values cover every encoder pass
/// of one step; `tokens` is the global-view sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub layer: usize,
    pub tokens: usize,
    pub attn_madds: u64,
    pub score_madds: u64,
    pub analytic_attn: u64,
    pub analytic_score: u64,
    pub minimal_attn: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub mode: RoutingMode,
    pub steps: usize,
    pub layers: Vec<LayerCost>,
    /// Forward matmul multiply-adds of one step.
    pub forward_madds: u64,
    /// Every counted forward operation of one step.
    pub forward_ops: OpCost,
    pub encoder_madds: u64,
    pub sigreg_madds: u64,
    pub sigreg_analytic: u64,
    pub params: usize,
    pub peak_bytes: usize,
}

impl CostReport {
    pub fn attention_total(&self) -> u64 {
        self.layers.iter().map(|l| l.attn_madds).sum()
    }
}

fn has_segment(tag: &str, seg: &str) -> bool {
    tag.split('/').any(|s| s == seg)
}

fn layer_of(tag: &str) -> Option<usize> {
    tag.split('/').find_map(|s| s.strip_prefix('L')?.parse().ok())
}

fn passes(cfg: &RunConfig) -> u64 {
    match cfg.objective {
        Objective::JointCls => 1,
        Objective::ThreePass => 3,
    }
}

fn layer_tokens(n: usize, layer: usize, mode: RoutingMode) -> usize {
    if layer >= 1 && mode.prunes() {
        1 + n
    } else {
        1 + 3 * n
    }
}

/// Analytic `(attention, score)` madds of `layer` for one step of `cfg`.
pub fn analytic_layer_cost(cfg: &RunConfig, layer: usize) -> Result<(u64, u64)> {
    let grids = [
        ((cfg.image_size / cfg.patch_size).pow(2), cfg.n_global),
        ((cfg.local_size / cfg.patch_size).pow(2), cfg.n_local),
    ];
    let (mut attn, mut score) = (0, 0);
    for (n, views) in grids {
        let c = attention_cost(layer_tokens(n, layer, cfg.routing), cfg.embed_dim, cfg.heads)?;
        let rows = (views * cfg.batch_size) as u64 * passes(cfg);
        attn += rows * c.total();
        score += rows * c.score_mix;
    }
    Ok((attn, score))
}

/// Score/mix ratio of persistent to pruned routing at `layer` for the
/// global-view grid of `cfg`.
pub fn routing_ratio(cfg: &RunConfig, layer: usize) -> f64 {
    let n = (cfg.image_size / cfg.patch_size).pow(2);
    let a = layer_tokens(n, layer, RoutingMode::Persistent) as f64;
    let b = layer_tokens(n, layer, RoutingMode::Pruned) as f64;
    (a / b).powi(2)
}

/// Cost report of one counted training step graph.
pub fn report_from_graph(cfg: &RunConfig, g: &Graph, params: usize, steps: usize) -> Result<CostReport> {
    let mut layers: Vec<LayerCost> = Vec::with_capacity(cfg.depth);
    let n = (cfg.image_size / cfg.patch_size).pow(2);
    for l in 0..cfg.depth {
        let (analytic_attn, analytic_score) = analytic_layer_cost(cfg, l)?;
        let minimal_attn = if l == 0 && cfg.routing.prunes() {
            let nl = (cfg.local_size / cfg.patch_size).pow(2);
            let per = |n: usize, v: usize| (v * cfg.batch_size) as u64 * passes(cfg) * minimal_first_layer_cost(n, cfg.embed_dim);
            per(n, cfg.n_global) + per(nl, cfg.n_local)
        } else {
            analytic_attn
        };
        layers.push(LayerCost {
            layer: l,
            tokens: layer_tokens(n, l, cfg.routing),
            attn_madds: 0,
            score_madds: 0,
            analytic_attn,
            analytic_score,
            minimal_attn,
        });
    }
    let (mut encoder, mut sigreg) = (0, 0);
    for (tag, c) in g.costs() {
        if has_segment(tag, "encoder") {
            encoder += c.matmul;
            if has_segment(tag, "attn") {
                if let Some(l) = layer_of(tag).filter(|&l| l < layers.len()) {
                    if has_segment(tag, "proj") || has_segment(tag, "score") {
                        layers[l].attn_madds += c.matmul;
                    }
                    if has_segment(tag, "score") {
                        layers[l].score_madds += c.matmul;
                    }
                }
            }
        }
        if has_segment(tag, "sigreg") {
            sigreg += c.total();
        }
    }
    let sig = cfg.sigreg_config()?;
    let rows = (cfg.n_global + cfg.n_local) * cfg.batch_size;
    let calls = passes(cfg);
    let total = g.total_cost();
    Ok(CostReport {
        mode: cfg.routing,
        steps,
        layers,
        forward_madds: total.matmul,
        forward_ops: total,
        encoder_madds: encoder,
        sigreg_madds: sigreg,
        sigreg_analytic: calls * sigreg_cost(rows, sig.num_directions, sig.num_knots(), cfg.projector_dim)?,
        params,
        peak_bytes: g.peak_live_bytes(),
    })
}

/// Runs `steps` counted training steps under `cfg` and reports the last.
pub fn profile_run(cfg: &RunConfig, steps: usize) -> Result<CostReport> {
    if steps == 0 {
        return Err(invalid("profile_run needs at least one step"));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let params = trainer.params.count();
    let mut last = None;
    for _ in 0..steps {
        let (_, g) = trainer.train_step_profiled()?;
        last = Some(g);
    }
    report_from_graph(cfg, &last.expect("steps >= 1"), params, steps)
}

/// Header of `profile.csv`.
pub const PROFILE_HEADER: &str =
    "mode,layer,tokens,attn_madds,total_madds,params,peak_bytes,score_madds,analytic_attn,minimal_attn,ratio";

/// CSV rows, one per (mode, layer). `ratio` is the analytic
/// persistent-to-pruned score/mix ratio of that layer.
pub fn profile_csv(cfg: &RunConfig, reports: &[CostReport]) -> String {
    let mut out = String::new();
    out.push_str(PROFILE_HEADER);
    out.push('\n');
    for r in reports {
        for l in &r.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:.6}",
                r.mode,
                l.layer,
                l.tokens,
                l.attn_madds,
                r.forward_madds,
                r.params,
                r.peak_bytes,
                l.score_madds,
                l.analytic_attn,
                l.minimal_attn,
                routing_ratio(cfg, l.layer)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_formula() {
        let c = attention_cost(10, 8, 2).unwrap();
        assert_eq!(c.score_mix, 2 * 100 * 8);
        assert_eq!(c.projection, 4 * 10 * 64);
        let one = attention_cost(1, 8, 2).unwrap();
        assert!(one.projection > one.score_mix);
        let d = attention_cost(20, 8, 2).unwrap();
        assert_eq!(d.score_mix, 4 * c.score_mix);
        assert!(attention_cost(0, 8, 2).is_err());
    }

    #[test]
    fn sigreg_formula() {
        assert_eq!(sigreg_cost(2, 3, 4, 5).unwrap(), 2 * 3 * 5 + 5 * 2 * 3 * 4);
        assert_eq!(sigreg_cost(8, 3, 4, 5).unwrap(), 4 * sigreg_cost(2, 3, 4, 5).unwrap());
        assert!(sigreg_cost(2, 0, 4, 5).is_err());
    }

    #[test]
    fn ratio_at_196() {
        let mut cfg = RunConfig::default();
        cfg.image_size = 112;
        cfg.patch_size = 8;
        let r = routing_ratio(&cfg, 1);
        assert!((r - 589f64.powi(2) / 197f64.powi(2)).abs() < 1e-12);
        assert!((r - 8.94).abs() / 8.94 < 0.01);
        assert_eq!(routing_ratio(&cfg, 0), 1.0);
    }

    #[test]
    fn tag_parsing() {
        assert!(has_segment("joint/global/encoder/L3/attn/score", "score"));
        assert_eq!(layer_of("joint/global/encoder/L3/attn/score"), Some(3));
        assert_eq!(layer_of("loss/sigreg"), None);
    }
}
