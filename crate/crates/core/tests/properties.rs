use proptest::prelude::*;
use pyragen::evalkit::{l1_metric, psnr, ssim, PSNR_CAP};
use pyragen::generator::{compose, DilationPlan, FusionMode, GeneratorConfig, PyramidGenerator};
use pyragen::imaging::{
    build_pyramid, build_pyramid_with, gen_center_mask, gen_freeform_mask, mask_hole_ratio, BrushConfig, HoleMask,
    MaskRule, RasterImage,
};
use pyragen::nnblocks::AttentionSpec;
use pyragen::objective::{disc_hinge, pyramid_loss, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 200,
        ..ProptestConfig::default()
    }
}

fn noise(h: usize, w: usize, c: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..h * w * c).map(|_| rng.random_range(-1.0..=1.0)).collect();
    RasterImage::new(h, w, c, v).unwrap()
}

/// Centre square united with a brush mask.
fn training_mask(size: usize, ratio: f64, seed: u64) -> HoleMask {
    let center = gen_center_mask(size, ratio).unwrap();
    center.union(&gen_freeform_mask(size, &BrushConfig::for_size(size), seed).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn pyramid_chain_and_masks(
        levels in 2usize..=4,
        coarse_exp in 3u32..=5,
        ratio in 0.15f64..0.55,
        seed in any::<u64>(),
    ) {
        let coarse = 1usize << coarse_exp;
        let size = coarse << (levels - 1);
        let image = noise(size, size, 3, seed);
        let mask = training_mask(size, ratio, seed);
        let top_ratio = mask_hole_ratio(&mask);
        let p = build_pyramid(&image, &mask, levels).unwrap();
        prop_assert_eq!(p.len(), levels);
        for (n, level) in p.levels.iter().enumerate() {
            prop_assert_eq!(level.image.height(), coarse << n);
            prop_assert_eq!(level.mask.width(), coarse << n);
            prop_assert!(level.mask.data().iter().all(|&v| v <= 1));
            prop_assert!(level.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!((mask_hole_ratio(&level.mask) - top_ratio).abs() <= 0.02);
        }
        prop_assert_eq!(&p.top().mask, &mask);
    }

    #[test]
    fn any_rule_never_unmarks_holes(size_exp in 4u32..=7, seed in any::<u64>()) {
        let size = 1usize << size_exp;
        let mask = gen_freeform_mask(size, &BrushConfig::for_size(size), seed).unwrap();
        let p = build_pyramid_with(&noise(size, size, 1, seed), &mask, 3, MaskRule::Any).unwrap();
        let coarse = &p.levels[0].mask;
        for y in 0..size {
            for x in 0..size {
                if mask.get(y, x) == 1 {
                    prop_assert_eq!(coarse.get(y / 4, x / 4), 1);
                }
            }
        }
        prop_assert!(coarse.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn center_mask_ratio_error_is_bounded(size in 32usize..=512, ratio in 0.15f64..=0.55) {
        let m = gen_center_mask(size, ratio).unwrap();
        prop_assert!((mask_hole_ratio(&m) - ratio).abs() <= 2.0 / size as f64);
    }

    #[test]
    fn freeform_masks_are_deterministic(size_exp in 4u32..=7, seed in any::<u64>()) {
        let size = 1usize << size_exp;
        let cfg = BrushConfig::for_size(size);
        prop_assert_eq!(gen_freeform_mask(size, &cfg, seed).unwrap(), gen_freeform_mask(size, &cfg, seed).unwrap());
    }

    #[test]
    fn compose_keeps_known_pixels(seed in any::<u64>(), ratio in 0.05f64..0.9) {
        let a = noise(16, 16, 3, seed);
        let b = noise(16, 16, 3, seed ^ 1);
        let m = training_mask(16, ratio, seed);
        let c = compose(&a, &b, &m).unwrap();
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let want = if m.get(y, x) == 1 { a.get(ch, y, x) } else { b.get(ch, y, x) };
                    prop_assert_eq!(c.get(ch, y, x).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn disc_hinge_is_nonnegative_and_zero_iff_margins_hold(
        real in prop::collection::vec(-3.0f32..3.0, 1..12),
        fake in prop::collection::vec(-3.0f32..3.0, 1..12),
    ) {
        let d = disc_hinge(&real, &fake);
        prop_assert!(d >= 0.0);
        let satisfied = real.iter().all(|&r| r >= 1.0) && fake.iter().all(|&f| f <= -1.0);
        prop_assert_eq!(d == 0.0, satisfied);
    }

    #[test]
    fn pyramid_loss_is_linear_in_each_weight(
        losses in prop::collection::vec(0.0f64..5.0, 3),
        lambdas in prop::collection::vec(0.0f64..10.0, 3),
        k in 0usize..3,
        t in 0.0f64..4.0,
    ) {
        let w = LossWeights { alpha: 1.0, lambdas: lambdas.clone() };
        let mut scaled = lambdas.clone();
        scaled[k] *= t;
        let ws = LossWeights { alpha: 1.0, lambdas: scaled };
        let base = pyramid_loss(&losses, &w).unwrap();
        let moved = pyramid_loss(&losses, &ws).unwrap();
        prop_assert!((moved - (base + (t - 1.0) * lambdas[k] * losses[k])).abs() < 1e-9);
    }

    #[test]
    fn metrics_reach_ideal_values_and_are_symmetric(seed in any::<u64>(), size in 11usize..24) {
        let a = noise(size, size, 3, seed);
        let b = noise(size, size, 3, seed ^ 7);
        prop_assert_eq!(l1_metric(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(l1_metric(&a, &b).unwrap() > 0.0);
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 && s >= -1.0);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn known_region_passes_through_exactly(
        levels in 2usize..=3,
        fusion in prop::sample::select(FusionMode::ALL.to_vec()),
        match_rate in 1usize..=2,
        top_skip in 0usize..=1,
        ratio in 0.1f64..0.6,
        seed in any::<u64>(),
    ) {
        let config = GeneratorConfig {
            base_width: 4,
            levels,
            top_skip,
            dilation: DilationPlan::adaptive(levels),
            fusion,
            attention: AttentionSpec { match_rate, ..AttentionSpec::default() },
            ..GeneratorConfig::default()
        };
        let gen = PyramidGenerator::new(config, seed).unwrap();
        let size = gen.input_divisor();
        let image = noise(size, size, 3, seed);
        let mask = training_mask(size, ratio, seed);
        let out = gen.inpaint(&image, &mask).unwrap();
        prop_assert!(out.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    if mask.get(y, x) == 0 {
                        prop_assert_eq!(out.get(ch, y, x).to_bits(), image.get(ch, y, x).to_bits());
                    }
                }
            }
        }
    }
}
