//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p harmony-core --test acceptance -- --nocapture`.

mod common;

use std::process::Command;
use std::time::Instant;

use common::*;
use harmony_core::augment::{assign_modes, augment_reference, AugmentConfig, MixConfig, TrainingMode};
use harmony_core::features::{BuiltinProvider, BUILTIN_DIM};
use harmony_core::harmonize::{harmonize_with, HarmonizeConfig};
use harmony_core::imageio::{load_image, load_manifest, ForegroundMask, Image};
use harmony_core::metrics::*;
use harmony_core::pipeline::{textured_gallery_id, textured_sample_id, TEXTURED_SCENES};
use harmony_core::retrieval::{GalleryIndex, RetrievalConfig};
use harmony_core::sgf::check::run_suite;

const IHARMONY4_ENV: &str = "HARMONY_IHARMONY4_MANIFEST";

type Check = (&'static str, fn() -> Verdict);

struct Verdict {
    passed: Option<bool>,
    detail: String,
}

fn pass_if(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed: Some(ok), detail: detail.into() }
}

fn retrieval_oracle_equivalence() -> Verdict {
    let set = fixtures("acceptance");
    let index = main_index(set);
    let samples = samples(&set.main);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let started = Instant::now();
    let engine: Vec<Vec<OracleOutcome>> = pool.install(|| {
        samples.iter().map(|s| grid_configs().iter().map(|c| engine_outcome(s, &index, c)).collect()).collect()
    });
    let secs = started.elapsed().as_secs_f64();
    let mut mismatches = 0;
    for (s, per_cfg) in samples.iter().zip(&engine) {
        let tables = oracle_tables(s, &index, 0.5, EPS_C_GRID[0]);
        for (cfg, got) in grid_configs().iter().zip(per_cfg) {
            mismatches += (got != &oracle_outcome(&tables, cfg)) as usize;
        }
    }
    pass_if(
        mismatches == 0 && secs < 30.0 && samples.len() == 50,
        format!("{} queries x 9 configs, {mismatches} mismatches, engine {secs:.2}s on one thread", samples.len()),
    )
}

fn threshold_monotonicity() -> Verdict {
    let set = fixtures("acceptance");
    let index = main_index(set);
    let mut violations = 0;
    for s in samples(&set.main) {
        let outcomes: Vec<_> = grid_configs().into_iter().map(|c| (engine_outcome(&s, &index, &c), c)).collect();
        for (lo, lc) in &outcomes {
            for (hi, hc) in &outcomes {
                if hc.eps_c >= lc.eps_c && hc.eps_a >= lc.eps_a {
                    violations += !is_subset(&hi.content_set, &lo.content_set) as usize;
                    violations += !is_subset(&hi.illum_set, &lo.illum_set) as usize;
                }
            }
        }
    }
    pass_if(violations == 0, format!("{violations} violations"))
}

fn illumination_discrimination() -> Verdict {
    let set = fixtures("acceptance");
    let index = main_index(set);
    let cfg = RetrievalConfig { eps_a: 0.9, ..Default::default() };
    let samples = samples(&set.main);
    let (mut bright_ok, mut same_ok) = (0, 0);
    for k in 0..TEXTURED_SCENES {
        let s = samples.iter().find(|s| s.id == textured_sample_id(k)).unwrap();
        let got = engine_outcome(s, &index, &cfg);
        let bright = textured_gallery_id(k, 2.0);
        bright_ok += (got.content_set.contains(&bright) && !got.illum_set.contains(&bright)) as usize;
        same_ok += got.illum_set.contains(&textured_gallery_id(k, 1.0)) as usize;
    }
    pass_if(
        bright_ok == TEXTURED_SCENES && same_ok == TEXTURED_SCENES,
        format!("gain 2.0 rejected by illumination only {bright_ok}/{TEXTURED_SCENES}; gain 1.0 kept {same_ok}/{TEXTURED_SCENES}"),
    )
}

fn sgf_invariants() -> Verdict {
    let started = Instant::now();
    let report = run_suite(7, 200).expect("suite");
    let secs = started.elapsed().as_secs_f64();
    let failed: Vec<&str> = report.outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    let worst = report.outcomes.iter().map(|o| o.max_error).fold(0.0, f64::max);
    pass_if(
        report.passed() && secs < 10.0,
        format!("{} checks over 200 draws in {secs:.2}s, max error {worst:.1e}, failed {failed:?}", report.outcomes.len()),
    )
}

fn loss_and_metrics() -> Verdict {
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let x = Image::filled(2, 2, [0.0; 3]).unwrap();
    let xhat = x.map_pixels(|px, py, p| if (px, py) == (0, 1) { [p[0], 51.0 / 255.0, p[2]] } else { p });
    let small = foreground_mse_loss(&xhat, &x, &ForegroundMask::rect(2, 2, 0, 1, 1, 2), DEFAULT_EPS_F).unwrap();
    let x = Image::filled(256, 256, [0.4; 3]).unwrap();
    let mask = ForegroundMask::rect(256, 256, 28, 28, 228, 228);
    let xhat = x.map_pixels(|px, py, p| if mask.get(px, py) { p.map(|v| v - 10.0 / 255.0) } else { p });
    let large = foreground_mse_loss(&xhat, &x, &mask, DEFAULT_EPS_F).unwrap();
    let base = Image::filled(4, 4, [0.3; 3]).unwrap();
    let at = |o: f64| psnr(&base, &base.map_pixels(|_, _, p| p.map(|v| v + o / 255.0))).unwrap();
    let (p16, p1) = (at(16.0), at(1.0));
    let analytic16 = 20.0 * (255.0f64 / 16.0).log10();
    pass_if(
        rel(small, 26.01) < 1e-9 && rel(large, 300.0) < 1e-9 && (p16 - analytic16).abs() < 1e-4 && (p1 - 48.1308).abs() < 1e-4,
        format!(
            "loss {small:.6} and {large:.6}; psnr {p16:.5} dB (analytic {analytic16:.5}, listed 24.0486 is 2e-4 high) and {p1:.5} dB"
        ),
    )
}

fn harmonization_ablation() -> Verdict {
    let set = fixtures("acceptance");
    let index = ablation_index(set);
    let cfg = HarmonizeConfig::default();
    let mut wins = 0;
    for s in samples(&set.ablation) {
        let target = s.target.as_ref().unwrap();
        let reference = load_image(&index.get(&format!("{}_ref", s.id)).unwrap().image_path).unwrap();
        let with = harmonize_with(&s, Some(("ref", &reference)), &cfg, &BuiltinProvider).unwrap();
        let without = harmonize_with(&s, None, &cfg, &BuiltinProvider).unwrap();
        wins += (foreground_mse(&with.image, target, &s.mask).unwrap() < foreground_mse(&without.image, target, &s.mask).unwrap())
            as usize;
    }
    let opts = EvalOptions { backend: Backend::Identity, runs: 1, seed: 7, eval_size: None };
    let empty = GalleryIndex::empty(harmony_core::features::BUILTIN_TAG, PATCH, 128, BUILTIN_DIM);
    let report = evaluate(&set.ablation, &empty, &BuiltinProvider, &RetrievalConfig::default(), &opts).unwrap();
    let mut exact = 0;
    for (score, e) in report.per_run[0].per_sample.iter().zip(&set.ablation.entries) {
        let c = load_image(set.ablation.root.join(&e.composite)).unwrap().to_rgb8();
        let t = load_image(set.ablation.root.join(e.target.as_ref().unwrap())).unwrap().to_rgb8();
        let naive = c.iter().zip(&t).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / c.len() as f64;
        exact += ((score.mse - naive).abs() <= 1e-9 * naive.max(1.0)) as usize;
    }
    let n = set.ablation.entries.len();
    pass_if(wins >= 9 && exact == n, format!("reference wins {wins}/{n}; identity rows match {exact}/{n}"))
}

fn augmentation() -> Verdict {
    let img = Image::from_fn(128, 96, |x, y| [x as f64 / 128.0, y as f64 / 96.0, 0.2]).unwrap();
    let mask = ForegroundMask::rect(128, 96, 40, 30, 70, 60);
    let bbox = mask.bounding_box().unwrap();
    let cfg = AugmentConfig { seed: 7, out_size: 8, ..Default::default() };
    let (mut inside, mut flips) = (0, 0);
    for draw in 0..10_000 {
        let a = augment_reference(&img, &mask, "acc", &cfg, draw).unwrap();
        inside += a.window.contains(&bbox) as usize;
        flips += a.flipped as usize;
    }
    let rate = flips as f64 / 10_000.0;
    let samples: Vec<(String, Vec<String>)> = (0..1000).map(|i| (format!("m{i}"), vec![format!("g{i}")])).collect();
    let manifest = assign_modes(&samples, &MixConfig { mix_seed: 7, ..Default::default() }).unwrap();
    let counts = [TrainingMode::NonReference, TrainingMode::Retrieved, TrainingMode::Augmented].map(|m| manifest.count(m));
    let within = counts.iter().zip([0.5f64, 0.25, 0.25]).all(|(n, p)| {
        (*n as f64 - 1000.0 * p).abs() <= 3.0 * (1000.0 * p * (1.0 - p)).sqrt()
    });
    pass_if(
        inside == 10_000 && (0.48..=0.52).contains(&rate) && within,
        format!("windows containing box {inside}/10000; flip rate {rate:.4}; modes {counts:?} of 1000"),
    )
}

fn determinism() -> Verdict {
    let set = fixtures("acceptance");
    let tmp = tempfile::tempdir().unwrap();
    let manifest = set.dir.join("ablation.json");
    let index_dir = tmp.path().join("index");
    let index = ablation_index(set);
    index.save(&index_dir).unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_harmony"))
            .args(["--seed", "7", "evaluate", "--runs", "5", "--eval-size", "128"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--index")
            .arg(&index_dir)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(out).unwrap()
    };
    let identical = run("a.json") == run("b.json");
    let single = RetrievalConfig { max_results: 1, ..Default::default() };
    let opts = EvalOptions { backend: Backend::Harmonize(HarmonizeConfig::default()), runs: 5, seed: 7, eval_size: Some(128) };
    let report = evaluate(&set.ablation, &index, &BuiltinProvider, &single, &opts).unwrap();
    let (ms, ps) = (report.aggregate.mse_std, report.aggregate.psnr_std);
    pass_if(identical && ms == 0.0 && ps == 0.0, format!("reports identical: {identical}; single-reference std mse {ms} psnr {ps}"))
}

fn iharmony4_composite_row() -> Verdict {
    let Ok(path) = std::env::var(IHARMONY4_ENV) else {
        return Verdict { passed: None, detail: format!("set {IHARMONY4_ENV} to a test-split manifest to run") };
    };
    let manifest = load_manifest(&path).expect("iHarmony4 manifest");
    let empty = GalleryIndex::empty(harmony_core::features::BUILTIN_TAG, PATCH, 256, BUILTIN_DIM);
    let opts = EvalOptions { backend: Backend::Identity, runs: 1, seed: 0, eval_size: Some(256) };
    let r = evaluate(&manifest, &empty, &BuiltinProvider, &RetrievalConfig::default(), &opts).unwrap();
    let (mse, psnr) = (r.aggregate.mse_mean, r.aggregate.psnr_mean);
    pass_if(
        (mse - 172.47).abs() <= 0.01 * 172.47 && (psnr - 31.63).abs() <= 0.01 * 31.63,
        format!("{} samples: MSE {mse:.2} (172.47), PSNR {psnr:.2} (31.63)", r.samples),
    )
}

#[test]
fn acceptance() {
    let criteria: [Check; 9] = [
        ("retrieval oracle equivalence", retrieval_oracle_equivalence),
        ("threshold monotonicity", threshold_monotonicity),
        ("illumination discrimination", illumination_discrimination),
        ("attention invariant suite", sgf_invariants),
        ("loss and metric values", loss_and_metrics),
        ("harmonization ablation", harmonization_ablation),
        ("augmentation statistics", augmentation),
        ("determinism", determinism),
        ("composite row on real test split", iharmony4_composite_row),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let v = check();
        let tag = match v.passed {
            Some(true) => "PASS",
            Some(false) => {
                failed.push(name);
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{tag} {name}: {}", v.detail);
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
