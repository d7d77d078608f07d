#![allow(dead_code)]

use fusejepa_core::grad::{Graph, ParamStore, Tensor, Var};
use fusejepa_core::rng::{derive_seed, rng_from, trunc_normal};
use fusejepa_core::Result;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| trunc_normal(&mut rng, 1.0)).collect()).unwrap()
}

pub fn positive_tensor(shape: &[usize], seed: u64) -> Tensor {
    let t = rand_tensor(shape, seed);
    let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(v * r)` for a fixed random `r`, so every output entry matters.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_tensor(g.shape(v), derive_seed(seed, &[77])));
    let p = g.mul(v, w)?;
    g.sum(p, None)
}

/// Central-difference check of `loss` against the analytic gradient of
/// parameter `name`, at up to `probes` entries. Returns the worst relative error.
pub fn param_check(
    store: &ParamStore,
    name: &str,
    probes: usize,
    loss: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let l = loss(&mut g, store).unwrap();
    let grads = g.backward(l).unwrap().into_param_grads();
    let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}")).clone();
    let n = analytic.numel();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for j in 0..probes.min(n) {
        let i = (j * 7919) % n;
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.get_mut(name).unwrap().data_mut()[i] += delta;
            let mut g = Graph::new();
            let l = loss(&mut g, &s).unwrap();
            g.value(l).item()
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}
