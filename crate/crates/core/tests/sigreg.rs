mod common;

use common::rand_tensor;
use fusejepa_core::grad::{Graph, Tensor};
use fusejepa_core::profiler::sigreg_cost;
use fusejepa_core::rng::rng_from;
use fusejepa_core::sigreg::{
    sample_directions, sigreg_loss, three_pass_sigreg, DirectionPolicy, Directions, SigRegConfig,
};
use rand::Rng;
use rand_distr::StandardNormal;

fn cfg(k: usize, t: usize, t_max: f64, d: usize) -> SigRegConfig {
    SigRegConfig::new(0.1, k, t, t_max, d, DirectionPolicy::ResamplePerStep).unwrap()
}

/// Uniform knots on (0, t_max] and trapezoid weights normalized to t_max.
fn oracle_knots(t: usize, t_max: f64) -> (Vec<f64>, Vec<f64>) {
    let h = t_max / t as f64;
    let knots = (1..=t).map(|j| h * j as f64).collect();
    let mut w = vec![h; t];
    w[0] *= 0.5;
    w[t - 1] *= 0.5;
    let s: f64 = w.iter().sum();
    (knots, w.iter().map(|x| x * t_max / s).collect())
}

/// Direct double loop over directions, knots and rows.
fn oracle_loss(z: &Tensor, dirs: &Directions, t: usize, t_max: f64) -> f64 {
    let (knots, w) = oracle_knots(t, t_max);
    let (b, d) = (z.shape()[0], z.shape()[1]);
    let mut total = 0.0;
    for k in 0..dirs.count {
        let proj: Vec<f64> = (0..b)
            .map(|i| (0..d).map(|j| z.data()[i * d + j] * dirs.row(k)[j]).sum())
            .collect();
        for (tj, wj) in knots.iter().zip(&w) {
            let c = proj.iter().map(|p| (tj * p).cos()).sum::<f64>() / b as f64;
            let s = proj.iter().map(|p| (tj * p).sin()).sum::<f64>() / b as f64;
            total += wj * ((c - (-tj * tj / 2.0).exp()).powi(2) + s * s);
        }
    }
    total / dirs.count as f64
}

fn loss_of(z: &Tensor, dirs: &Directions, cfg: &SigRegConfig) -> f64 {
    let mut g = Graph::new();
    let v = g.input(z.clone());
    let l = sigreg_loss(&mut g, v, dirs, cfg).unwrap();
    g.value(l).item()
}

fn normal(b: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    Tensor::new(vec![b, d], (0..b * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

#[test]
fn collapsed_embeddings_match_closed_form() {
    for (t, t_max) in [(64, 4.0), (17, 2.5), (3, 1.0)] {
        let c = cfg(1, t, t_max, 5);
        let dirs = sample_directions(1, 5, 9).unwrap();
        let (knots, w) = oracle_knots(t, t_max);
        let expected: f64 = knots
            .iter()
            .zip(&w)
            .map(|(tj, wj)| wj * (1.0 - (-tj * tj / 2.0).exp()).powi(2))
            .sum();
        let got = loss_of(&Tensor::zeros(vec![8, 5]), &dirs, &c);
        assert!((got - expected).abs() < 1e-9, "T={t}: {got} vs {expected}");
    }
}

#[test]
fn constant_rows_match_hand_evaluation() {
    let d = 4;
    let c = cfg(3, 9, 3.0, d);
    let dirs = sample_directions(3, d, 2).unwrap();
    let row = [0.3, -1.2, 0.7, 0.05];
    let z = Tensor::new(vec![5, d], row.iter().cycle().take(5 * d).copied().collect()).unwrap();
    let (knots, w) = oracle_knots(9, 3.0);
    let mut expected = 0.0;
    for k in 0..3 {
        let a: f64 = row.iter().zip(dirs.row(k)).map(|(x, y)| x * y).sum();
        for (tj, wj) in knots.iter().zip(&w) {
            let s_hat = (tj * a).sin();
            let c_hat = (tj * a).cos();
            expected += wj * ((c_hat - (-tj * tj / 2.0).exp()).powi(2) + s_hat * s_hat);
        }
    }
    expected /= 3.0;
    assert!((loss_of(&z, &dirs, &c) - expected).abs() < 1e-12);
}

#[test]
fn random_embeddings_match_direct_loop() {
    for seed in 0..5 {
        let (b, d, k, t) = (7 + seed as usize, 3, 4, 11);
        let c = cfg(k, t, 3.5, d);
        let dirs = sample_directions(k, d, seed).unwrap();
        let z = rand_tensor(&[b, d], seed);
        let got = loss_of(&z, &dirs, &c);
        let want = oracle_loss(&z, &dirs, t, 3.5);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn gaussian_sample_sits_at_the_monte_carlo_floor() {
    let (b, d, k, t) = (4096, 16, 16, 64);
    let c = cfg(k, t, 4.0, d);
    let dirs = sample_directions(k, d, 1).unwrap();
    let floor: f64 = (0..50).map(|s| loss_of(&normal(b, d, 1000 + s), &dirs, &c)).sum::<f64>() / 50.0;
    let loss = loss_of(&normal(b, d, 7), &dirs, &c);
    assert!(loss <= 5.0 * floor, "{loss} vs floor {floor}");
    let collapsed = loss_of(&Tensor::zeros(vec![b, d]), &dirs, &c);
    assert!(collapsed > 100.0 * floor);
}

#[test]
fn converges_in_knot_count() {
    let d = 3;
    let dirs = sample_directions(4, d, 5).unwrap();
    let z = normal(64, d, 3).data().iter().map(|v| 0.6 * v + 0.2).collect::<Vec<_>>();
    let z = Tensor::new(vec![64, d], z).unwrap();
    let values: Vec<f64> = [16, 64, 256, 1024].iter().map(|&t| loss_of(&z, &dirs, &cfg(4, t, 4.0, d))).collect();
    let errs: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    // First-order quadrature: each 4x refinement shrinks the change ~4x.
    assert!(errs[1] < errs[0] / 3.0 && errs[2] < errs[1] / 3.0, "{values:?}");
    assert!(errs[2] / values[3] < 5e-3);
}

#[test]
fn anisotropy_is_penalized() {
    let d = 8;
    let c = cfg(32, 32, 4.0, d);
    let dirs = sample_directions(32, d, 4).unwrap();
    let iso = normal(2048, d, 11);
    let mut stretched = iso.clone();
    for (i, v) in stretched.data_mut().iter_mut().enumerate() {
        if i % d == 0 {
            *v *= 3.0;
        }
    }
    let shifted = Tensor::new(vec![2048, d], iso.data().iter().map(|v| v + 1.0).collect()).unwrap();
    let l_iso = loss_of(&iso, &dirs, &c);
    assert!(loss_of(&stretched, &dirs, &c) > 5.0 * l_iso);
    assert!(loss_of(&shifted, &dirs, &c) > 5.0 * l_iso);
}

#[test]
fn three_pass_is_the_mean_of_single_passes() {
    for seed in 0..5 {
        let d = 4;
        let c = cfg(6, 16, 3.0, d);
        let dirs = sample_directions(6, d, seed).unwrap();
        let zs: Vec<Tensor> = (0..3).map(|i| rand_tensor(&[10, d], seed * 3 + i)).collect();
        let mut g = Graph::new();
        let v: Vec<_> = zs.iter().map(|z| g.input(z.clone())).collect();
        let l = three_pass_sigreg(&mut g, v[0], v[1], v[2], &dirs, &c).unwrap();
        let mean = zs.iter().map(|z| loss_of(z, &dirs, &c)).sum::<f64>() / 3.0;
        assert!((g.value(l).item() - mean).abs() < 1e-12);

        let mut g = Graph::new();
        let a = g.input(zs[0].clone());
        let l = three_pass_sigreg(&mut g, a, a, a, &dirs, &c).unwrap();
        assert_eq!(g.value(l).item(), loss_of(&zs[0], &dirs, &c));
    }
}

fn counted(b: usize, k: usize, t: usize, d: usize) -> u64 {
    let c = cfg(k, t, 3.0, d);
    let dirs = sample_directions(k, d, 0).unwrap();
    let mut g = Graph::new();
    let z = g.input(rand_tensor(&[b, d], 1));
    sigreg_loss(&mut g, z, &dirs, &c).unwrap();
    g.cost_under("sigreg").total()
}

fn slope(xs: &[usize], ys: &[u64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|&x| (x as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| (y as f64).ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[test]
fn counted_cost_is_linear_and_matches_formula() {
    let range: Vec<usize> = (0..5).map(|i| 1 << i).collect();
    // (B, K, T, d) bases; each sweep multiplies one entry by 1..16 in the
    // regime where its term dominates.
    let sweeps: [(&str, [usize; 4], usize); 4] = [
        ("B", [64, 4, 8, 8], 0),
        ("K", [64, 2, 8, 8], 1),
        ("T", [64, 4, 64, 2], 2),
        ("d", [64, 4, 2, 64], 3),
    ];
    for (name, base, axis) in sweeps {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &m in &range {
            let mut p = base;
            p[axis] *= m;
            let c = counted(p[0], p[1], p[2], p[3]);
            let a = sigreg_cost(p[0], p[1], p[2], p[3]).unwrap();
            let rel = (c as f64 - a as f64).abs() / a as f64;
            assert!(rel <= 0.10, "{name} x{m}: counted {c}, analytic {a}");
            xs.push(p[axis]);
            ys.push(c);
        }
        let s = slope(&xs, &ys);
        assert!((s - 1.0).abs() <= 0.1, "{name}: slope {s}");
    }
}
