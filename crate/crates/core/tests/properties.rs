use fusejepa_core::grad::{Graph, ParamStore, Tensor};
use fusejepa_core::optim::cosine_warmup;
use fusejepa_core::probes::{pixel_shuffle, seg_miou};
use fusejepa_core::profiler::{attention_cost, sigreg_cost};
use fusejepa_core::scene::{gen_scene, render_sparse_depth, DepthPoint, DepthRenderConfig};
use fusejepa_core::sigreg::{
    combined_loss, invariance_loss, sample_directions, sigreg_loss, DirectionPolicy, Directions, SigRegConfig,
    ViewBatch,
};
use fusejepa_core::train::{load_checkpoint, save_checkpoint, RunConfig};
use fusejepa_core::views::{plan_views, ViewConfig};
use fusejepa_core::vit::{make_mask, RoutingMode, TokenRole};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn views(v: usize, b: usize, d: usize) -> impl Strategy<Value = Vec<Tensor>> {
    prop::collection::vec(tensor(vec![b, d]), v)
}

fn eval_views<R>(ts: &[Tensor], n_global: usize, f: impl FnOnce(&mut Graph, &ViewBatch) -> R) -> R {
    let mut g = Graph::new();
    let vars: Vec<_> = ts.iter().map(|t| g.input(t.clone())).collect();
    let batch = ViewBatch {
        globals: vars[..n_global].to_vec(),
        locals: vars[n_global..].to_vec(),
    };
    f(&mut g, &batch)
}

fn sigreg_value(z: &Tensor, dirs: &Directions, cfg: &SigRegConfig) -> f64 {
    let mut g = Graph::new();
    let v = g.input(z.clone());
    let l = sigreg_loss(&mut g, v, dirs, cfg).unwrap();
    g.value(l).item()
}

fn mode() -> impl Strategy<Value = RoutingMode> {
    prop_oneof![
        Just(RoutingMode::Pruned),
        Just(RoutingMode::Persistent),
        Just(RoutingMode::RgbOnly),
        Just(RoutingMode::ModOnly),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invariance_is_nonnegative_and_zero_on_equal_views(ts in views(5, 3, 4), ng in 1usize..4) {
        let l = eval_views(&ts, ng, |g, b| { let l = invariance_loss(g, b).unwrap(); g.value(l).item() });
        prop_assert!(l >= 0.0);
        let same = vec![ts[0].clone(); 5];
        let z = eval_views(&same, ng, |g, b| { let l = invariance_loss(g, b).unwrap(); g.value(l).item() });
        prop_assert_eq!(z, 0.0);
    }

    #[test]
    fn sigreg_is_bounded_and_row_order_free(z in tensor(vec![6, 3]), seed in 0u64..1000, k in 1usize..6) {
        let cfg = SigRegConfig::new(0.1, k, 8, 3.0, 3, DirectionPolicy::Fixed).unwrap();
        let dirs = sample_directions(k, 3, seed).unwrap();
        let l = sigreg_value(&z, &dirs, &cfg);
        let bound: f64 = cfg.weights.iter().sum::<f64>() * 4.0;
        prop_assert!((0.0..=bound).contains(&l));
        let mut rows: Vec<&[f64]> = z.data().chunks(3).collect();
        rows.reverse();
        let flipped = Tensor::new(vec![6, 3], rows.concat()).unwrap();
        prop_assert!((sigreg_value(&flipped, &dirs, &cfg) - l).abs() < 1e-12);
    }

    #[test]
    fn sigreg_rotates_with_its_directions(z in tensor(vec![5, 2]), angle in 0.0f64..6.28, seed in 0u64..100) {
        let cfg = SigRegConfig::new(0.1, 4, 8, 3.0, 2, DirectionPolicy::Fixed).unwrap();
        let dirs = sample_directions(4, 2, seed).unwrap();
        let (c, s) = (angle.cos(), angle.sin());
        let rot = |v: &[f64]| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let rz = Tensor::new(vec![5, 2], z.data().chunks(2).flat_map(rot).collect()).unwrap();
        let rd = Directions { data: dirs.data.chunks(2).flat_map(rot).collect(), ..dirs.clone() };
        prop_assert!((sigreg_value(&z, &dirs, &cfg) - sigreg_value(&rz, &rd, &cfg)).abs() < 1e-10);
    }

    #[test]
    fn combined_loss_endpoints(ts in views(3, 4, 2), seed in 0u64..50) {
        let dirs = sample_directions(3, 2, seed).unwrap();
        for lambda in [0.0, 1.0] {
            let cfg = SigRegConfig::new(lambda, 3, 6, 3.0, 2, DirectionPolicy::Fixed).unwrap();
            let (total, sig, inv) = eval_views(&ts, 2, |g, b| {
                let t = combined_loss(g, b, &dirs, &cfg).unwrap();
                (g.value(t.total).item(), g.value(t.sigreg).item(), g.value(t.invariance).item())
            });
            prop_assert_eq!(total, if lambda == 0.0 { inv } else { sig });
        }
    }

    #[test]
    fn rendering_ignores_point_order(
        pts in prop::collection::vec((0usize..5, 0usize..5, 0.5f64..120.0), 0..30),
        r_max in 10.0f64..100.0,
    ) {
        let cfg = DepthRenderConfig { r_max, ..DepthRenderConfig::default() };
        let pts: Vec<DepthPoint> = pts.into_iter().map(|(y, x, depth)| DepthPoint { y, x, depth }).collect();
        let a = render_sparse_depth(&pts, 5, 5, &cfg).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        prop_assert_eq!(&render_sparse_depth(&rev, 5, 5, &cfg).unwrap(), &a);
        prop_assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for p in &pts {
            let nearest = pts.iter().filter(|q| q.y == p.y && q.x == p.x).map(|q| q.depth).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(a.at(p.y, p.x, 0), (nearest / r_max).min(1.0) as f32);
        }
    }

    #[test]
    fn masks_never_cross_pairs(n in 1usize..20, layer in 0usize..4, m in mode()) {
        let mask = make_mask(layer, m, n);
        for q in 0..mask.tokens() {
            prop_assert!(mask.matrix.row(q).iter().any(|&a| a));
        }
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                prop_assert!(!mask.allows(TokenRole::Fusion(i), TokenRole::Cam(j)));
                prop_assert!(!mask.allows(TokenRole::Fusion(i), TokenRole::Mod(j)));
            }
        }
        if layer >= 1 && m.prunes() {
            prop_assert_eq!(mask.tokens(), 1 + n);
        } else {
            prop_assert_eq!(mask.tokens(), 1 + 3 * n);
        }
    }

    #[test]
    fn attention_cost_scaling(t in 1usize..300, dh in 1usize..8, heads in 1usize..4) {
        let d = dh * heads;
        let a = attention_cost(t, d, heads).unwrap();
        let b = attention_cost(2 * t, d, heads).unwrap();
        prop_assert_eq!(b.score_mix, 4 * a.score_mix);
        prop_assert_eq!(b.projection, 2 * a.projection);
    }

    #[test]
    fn sigreg_cost_is_linear_in_batch(b in 1usize..100, k in 1usize..20, t in 1usize..70, d in 1usize..40) {
        prop_assert_eq!(sigreg_cost(2 * b, k, t, d).unwrap(), 2 * sigreg_cost(b, k, t, d).unwrap());
    }

    #[test]
    fn crops_stay_inside_the_frame(h in 16usize..64, w in 16usize..64, seed: u64) {
        let cfg = ViewConfig::default();
        for p in plan_views(h, w, &cfg, seed).unwrap() {
            prop_assert!(p.rect.w >= 1 && p.rect.h >= 1);
            prop_assert!(p.rect.x + p.rect.w <= w && p.rect.y + p.rect.h <= h);
        }
    }

    #[test]
    fn schedule_stays_below_base(step in 0u64..2000, total in 1u64..2000, frac in 0.0f64..0.5) {
        let lr = cosine_warmup(step, total, frac, 1e-3);
        prop_assert!((0.0..=1e-3 * (1.0 + 1e-12)).contains(&lr));
    }

    #[test]
    fn shuffle_is_a_permutation(x in tensor(vec![1, 4, 8])) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = pixel_shuffle(&mut g, v, 2).unwrap();
        let mut a = x.data().to_vec();
        let mut b = g.value(y).data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn miou_is_a_fraction(labels in prop::collection::vec(0u8..4, 1..64), pred in prop::collection::vec(0u8..4, 64)) {
        let pred = &pred[..labels.len()];
        let m = seg_miou(pred, &labels, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(seg_miou(&labels, &labels, 4).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn config_text_round_trips(
        seed: u64, steps in 1u64..100_000, lambda in 0.0f64..1.0, lr in 1e-6f64..1e-1,
        m in mode(), three in any::<bool>(), photometric in any::<bool>(),
    ) {
        let mut cfg = RunConfig { seed, steps, lambda, lr, routing: m, photometric, ..RunConfig::default() };
        if three {
            cfg.set("objective", "three-pass").unwrap();
        }
        prop_assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), step: u64) {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new();
        params.insert("a", Tensor::vector(values.clone()));
        params.insert("b.w", Tensor::new(vec![values.len(), 1], values.iter().map(|v| -v).collect()).unwrap());
        let cfg = RunConfig::default();
        let path = save_checkpoint(&dir.path().join("c"), step, &params, &cfg).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        prop_assert_eq!(ck.step, step);
        prop_assert_eq!(ck.params, params);
    }

    #[test]
    fn scenes_are_pure_functions_of_seed(seed: u64) {
        prop_assert_eq!(gen_scene(seed, 16), gen_scene(seed, 16));
    }
}
