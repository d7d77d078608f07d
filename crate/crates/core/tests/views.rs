use fusejepa_core::image::Image;
use fusejepa_core::scene::{gen_scene, SceneSample};
use fusejepa_core::views::{make_views, plan_views, pool_depth, render_view, Photometric, ResizeMode, ViewConfig};

const SIZE: usize = 48;

/// RGB channel 0 and the companion both hold the same smooth ramp, so a
/// synchronized crop keeps them aligned after resizing.
fn ramp_sample(seed: u64) -> SceneSample {
    let mut s = gen_scene(seed, SIZE);
    let f = |y: usize, x: usize| 0.1 + 0.8 * (0.6 * x as f32 + 0.4 * y as f32) / SIZE as f32;
    for y in 0..SIZE {
        for x in 0..SIZE {
            s.rgb.set(y, x, 0, f(y, x));
            s.companion.set(y, x, 0, f(y, x));
        }
    }
    s
}

#[test]
fn thousand_views_share_crop_and_flip() {
    let cfg = ViewConfig::default();
    let mut count = 0;
    let mut seed = 0;
    while count < 1000 {
        let s = gen_scene(seed, SIZE);
        let (lo, hi) = (s.companion.min_value(), s.companion.max_value());
        let set = make_views(&s, &cfg, seed + 1000).unwrap();
        for v in set.iter() {
            assert_eq!(v.rgb_crop, v.companion_crop);
            let expect = {
                let c = s.companion.crop(v.companion_crop.rect);
                let c = if v.companion_crop.flip { c.flip_horizontal() } else { c };
                pool_depth(&c, v.companion.height)
            };
            assert_eq!(v.companion, expect);
            assert!(v.companion.min_value() >= lo && v.companion.max_value() <= hi);
            assert!(v.rgb.data.iter().all(|p| (0.0..=1.0).contains(p)));
            count += 1;
        }
        seed += 1;
    }
}

#[test]
fn streams_stay_aligned_in_content() {
    let cfg = ViewConfig {
        photometric: false,
        ..ViewConfig::default()
    };
    let tol = 0.8 * 1.0 / SIZE as f32 + 1e-4;
    for seed in 0..60 {
        let s = ramp_sample(seed);
        for v in make_views(&s, &cfg, seed).unwrap().iter() {
            for y in 0..v.rgb.height {
                for x in 0..v.rgb.width {
                    let (a, b) = (v.rgb.at(y, x, 0), v.companion.at(y, x, 0));
                    assert!((a - b).abs() <= tol, "seed {seed} ({y},{x}): {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn flip_is_equivariant_with_nearest_resize() {
    let cfg = ViewConfig::default();
    for seed in 0..50 {
        let s = gen_scene(seed, SIZE);
        for mut plan in plan_views(SIZE, SIZE, &cfg, seed).unwrap() {
            plan.photometric = Photometric::NONE;
            plan.flip = false;
            let plain = render_view(&s, &plan, ResizeMode::Nearest);
            plan.flip = true;
            let flipped = render_view(&s, &plan, ResizeMode::Nearest);
            assert_eq!(flipped.rgb, plain.rgb.flip_horizontal());
            assert_eq!(flipped.companion, plain.companion.flip_horizontal());
        }
    }
}

#[test]
fn pooling_ignores_missing_returns() {
    let mut img = Image::zeros(4, 4, 1);
    img.set(0, 0, 0, 0.4);
    img.set(3, 3, 0, 0.8);
    let p = pool_depth(&img, 2);
    assert_eq!(p.data, vec![0.4, 0.0, 0.0, 0.8]);
}
