use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fusejepa_core::grad::{Graph, Tensor};
use fusejepa_core::scene::gen_scene;
use fusejepa_core::sigreg::{sample_directions, sigreg_loss, SigRegConfig};
use fusejepa_core::views::clean_view;
use fusejepa_core::vit::{encode, init_encoder, make_mask, EncoderConfig, InputPass, RoutingMode};

fn wavy(shape: Vec<usize>, phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (i as f64 * 0.37 + phase).sin()).collect();
    Tensor::new(shape, data).unwrap()
}

fn bench_sigreg(c: &mut Criterion) {
    let mut group = c.benchmark_group("sigreg_loss");
    let cfg = SigRegConfig::with_defaults(16);
    let dirs = sample_directions(cfg.num_directions, 16, 1).unwrap();
    for b in [64usize, 256, 1024] {
        let z = wavy(vec![b, 16], 0.1);
        group.bench_with_input(BenchmarkId::new("fwd_bwd", b), &z, |bench, z| {
            bench.iter(|| {
                let mut g = Graph::new();
                let v = g.input(z.clone());
                let loss = sigreg_loss(&mut g, v, &dirs, &cfg).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_encoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_forward");
    group.sample_size(10);
    let samples: Vec<_> = (0..4).map(|s| clean_view(&gen_scene(s, 32), 32)).collect();
    let rgb: Vec<_> = samples.iter().map(|v| v.rgb.clone()).collect();
    let comp: Vec<_> = samples.iter().map(|v| v.companion.clone()).collect();
    for routing in [RoutingMode::Pruned, RoutingMode::Persistent] {
        let cfg = EncoderConfig {
            image_size: 32,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            routing,
            ..EncoderConfig::default()
        };
        let store = init_encoder(&cfg, 0).unwrap();
        group.bench_function(routing.as_str(), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                encode(&mut g, &store, &cfg, &rgb, &comp, InputPass::Joint).unwrap().cls
            })
        });
    }
    group.finish();
}

fn bench_softmax(c: &mut Criterion) {
    let mut group = c.benchmark_group("masked_softmax");
    for n in [16usize, 64] {
        let mask = make_mask(0, RoutingMode::Pruned, n);
        let t = mask.tokens();
        let x = wavy(vec![8, t, t], 0.3);
        group.bench_with_input(BenchmarkId::from_parameter(t), &x, |bench, x| {
            bench.iter(|| {
                let mut g = Graph::new();
                let v = g.input(x.clone());
                g.masked_softmax(v, &mask.matrix).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sigreg, bench_encoder, bench_softmax);
criterion_main!(benches);
