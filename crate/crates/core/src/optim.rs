//! AdamW with decoupled weight decay and the learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::grad::{round_to_f32, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(invalid("optimizer needs lr > 0 and betas in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(invalid("optimizer needs eps > 0 and weight decay >= 0"));
        }
        Ok(())
    }
}

/// Matrices decay; vectors (biases, norm gains, single embeddings), the
/// positional table and token banks do not.
pub fn decays(name: &str, value: &Tensor) -> bool {
    value.shape().len() >= 2 && !name.starts_with("pos") && !name.starts_with("token.")
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient
    /// entry are left untouched; updated values are rounded to `f32`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| crate::Error::UnknownParam(name.clone()))?;
            if param.shape() != grad.shape() {
                return Err(invalid(format!("gradient shape mismatch for {name}")));
            }
            let decay = if decays(name, param) { c.weight_decay } else { 0.0 };
            let n = param.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let p = param.data_mut();
            for (j, &gj) in grad.data().iter().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * (mh / (vh.sqrt() + c.eps) + decay * p[j]);
            }
            round_to_f32(p);
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_frac` of `total` steps, then cosine decay to 0.
pub fn cosine_warmup(step: u64, total: u64, warmup_frac: f64, base: f64) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64 * warmup_frac).round() as u64).min(total);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let t = ((step - warm) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// `base * gamma^epoch`.
pub fn step_decay(epoch: usize, base: f64, gamma: f64) -> f64 {
    base * gamma.powi(epoch as i32)
}
