mod common;

use common::*;
use harmony_core::features::{BuiltinProvider, PatchGrid};
use harmony_core::harmonize::*;
use harmony_core::imageio::{CompositeSample, ForegroundMask, Image};
use harmony_core::metrics::foreground_mse;
use harmony_core::pipeline::{ablation_case, ABLATION_CASES};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

fn cases() -> Vec<harmony_core::pipeline::AblationCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..ABLATION_CASES).map(|k| ablation_case(k, &mut rng)).collect()
}

fn fg_mean(img: &Image, mask: &ForegroundMask) -> [f64; 3] {
    let mut s = [0.0; 3];
    let mut n = 0.0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                let p = img.pixel(x, y);
                for c in 0..3 {
                    s[c] += p[c];
                }
                n += 1.0;
            }
        }
    }
    s.map(|v| v / n)
}

#[test]
fn already_harmonized_composite_keeps_its_statistics() {
    let cfg = HarmonizeConfig::default();
    for case in cases() {
        let sample = CompositeSample::new("same", case.target.clone(), case.mask.clone(), None).unwrap();
        let out = harmonize_with(&sample, Some(("target", &case.target)), &cfg, &BuiltinProvider).unwrap();
        for c in 0..3 {
            assert!((out.target_stats.mean[c] - out.foreground_stats.mean[c]).abs() < 1e-3);
            assert!((out.target_stats.std[c] - out.foreground_stats.std[c]).abs() < 1e-3);
        }
        let (a, b) = (fg_mean(&out.image, &case.mask), fg_mean(&case.target, &case.mask));
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-3);
        }
    }
}

#[test]
fn brightened_foreground_returns_to_target_mean() {
    let cfg = HarmonizeConfig::default();
    for case in cases() {
        let composite = case.target.map_pixels(|x, y, p| if case.mask.get(x, y) { p.map(|v| (v + 0.2).min(1.0)) } else { p });
        let sample = CompositeSample::new("bright", composite, case.mask.clone(), Some(case.target.clone())).unwrap();
        let out = harmonize_with(&sample, Some(("ref", &case.reference)), &cfg, &BuiltinProvider).unwrap();
        let (a, b) = (fg_mean(&out.image, &case.mask), fg_mean(&case.target, &case.mask));
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 0.02, "channel {c}: {} vs {}", a[c], b[c]);
        }
    }
}

#[test]
fn reference_helps_when_only_it_holds_the_object() {
    let cfg = HarmonizeConfig::default();
    let mut wins = 0;
    for case in cases() {
        let sample = CompositeSample::new("abl", case.composite.clone(), case.mask.clone(), Some(case.target.clone())).unwrap();
        let with = harmonize_with(&sample, Some(("ref", &case.reference)), &cfg, &BuiltinProvider).unwrap();
        let without = harmonize_with(&sample, None, &cfg, &BuiltinProvider).unwrap();
        let e_with = foreground_mse(&with.image, &case.target, &case.mask).unwrap();
        let e_without = foreground_mse(&without.image, &case.target, &case.mask).unwrap();
        wins += (e_with < e_without) as usize;
        assert!(with.reference_mass > 0.5);
    }
    assert!(wins >= 9, "{wins}/10");
}

#[test]
fn use_reference_false_ignores_the_reference() {
    let case = &cases()[0];
    let sample = CompositeSample::new("abl", case.composite.clone(), case.mask.clone(), None).unwrap();
    let cfg = HarmonizeConfig { use_reference: false, ..Default::default() };
    let a = harmonize_with(&sample, Some(("ref", &case.reference)), &cfg, &BuiltinProvider).unwrap();
    let b = harmonize_with(&sample, None, &cfg, &BuiltinProvider).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.reference_mass, 0.0);
}

#[test]
fn value_only_mode_preserves_hue() {
    let case = &cases()[1];
    let sample = CompositeSample::new("abl", case.composite.clone(), case.mask.clone(), None).unwrap();
    let cfg = HarmonizeConfig { color_space: ColorSpace::HsvVOnly, ..Default::default() };
    let out = harmonize(&sample, Some(&case.reference), &cfg).unwrap();
    for y in (0..128).step_by(7) {
        for x in (0..128).step_by(5) {
            if case.mask.get(x, y) {
                let h0 = harmony_core::features::rgb_to_hsv_pixel(case.composite.pixel(x, y))[0];
                let h1 = harmony_core::features::rgb_to_hsv_pixel(out.pixel(x, y))[0];
                assert!((h0 - h1).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn output_is_deterministic_and_dims_are_checked() {
    let case = &cases()[2];
    let sample = CompositeSample::new("abl", case.composite.clone(), case.mask.clone(), None).unwrap();
    let cfg = HarmonizeConfig::default();
    let a = harmonize(&sample, Some(&case.reference), &cfg).unwrap();
    let b = harmonize(&sample, Some(&case.reference), &cfg).unwrap();
    assert_eq!(a, b);
    let bad = HarmonizeConfig { sgf_dims: harmony_core::sgf::SgfDims { d_e: 9, d_c: 0, d_proj: 64 }, ..Default::default() };
    assert!(harmonize(&sample, None, &bad).is_err());
}

#[test]
fn identical_images_give_identical_tokens() {
    let set = fixtures("harmonize");
    let s = &samples(&set.main)[0];
    let grid = PatchGrid::for_image(&s.composite, PATCH).unwrap();
    assert_eq!(encode_tokens(&s.composite, &grid).unwrap(), encode_tokens(&s.composite.clone(), &grid).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn background_is_bit_identical_and_output_in_range(
        seed in any::<u64>(), x0 in 0u32..40, y0 in 0u32..40, w in 16u32..24, h in 16u32..24,
    ) {
        let mut d = harmony_core::sgf::check::Draws::new(seed);
        let comp = Image::from_fn(64, 64, |_, _| [d.unit(), d.unit(), d.unit()]).unwrap();
        let reference = Image::from_fn(64, 64, |x, y| [((x * y) % 7) as f64 / 7.0, 0.5, (x % 3) as f64 / 3.0]).unwrap();
        let mask = ForegroundMask::rect(64, 64, x0, y0, x0 + w, y0 + h);
        let sample = CompositeSample::new("p", comp.clone(), mask.clone(), None).unwrap();
        let out = harmonize(&sample, Some(&reference), &HarmonizeConfig::default()).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !mask.get(x, y) {
                    prop_assert_eq!(out.pixel(x, y), comp.pixel(x, y));
                }
            }
        }
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
