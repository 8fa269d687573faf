use harmony_core::raif::RaifBlob;
use harmony_core::sgf::check::{golden_bundle, run_suite, Draws, Instance, TOLERANCE};
use harmony_core::sgf::*;
use proptest::prelude::*;

fn mat(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut d = Draws::new(seed);
    d.matrix(rows, cols)
}

/// Oracle: softmax(Q K^T / sqrt(d)) computed one entry at a time.
fn oracle_weights(q_in: &Matrix, k_in: &Matrix, w: &ProjectionWeights) -> Vec<Vec<f64>> {
    let dp = w.dims.d_proj;
    let proj = |x: &Matrix, m: &Matrix, i: usize, t: usize| (0..x.cols()).map(|k| x.get(i, k) * m.get(k, t)).sum::<f64>();
    (0..q_in.rows())
        .map(|i| {
            let s: Vec<f64> = (0..k_in.rows())
                .map(|j| (0..dp).map(|t| proj(q_in, &w.w_query, i, t) * proj(k_in, &w.w_key, j, t)).sum::<f64>() / (dp as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            s.iter().map(|v| (v - m).exp() / z).collect()
        })
        .collect()
}

#[test]
fn full_suite_passes_quickly() {
    let started = std::time::Instant::now();
    let report = run_suite(2024, 200).unwrap();
    for o in &report.outcomes {
        assert!(o.passed, "{o:?}");
    }
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn vanilla_matches_entrywise_oracle() {
    let dims = SgfDims { d_e: 5, d_c: 1, d_proj: 3 };
    let w = init_weights(11, dims, AttentionMode::Vanilla).unwrap();
    let (e_f, e_b) = (mat(4, 5, 1), mat(6, 5, 2));
    let got = softmax_rows(&attention_vanilla(&e_f, &e_b, &w).unwrap());
    let want = oracle_weights(&e_f, &e_b, &w);
    for (i, row) in want.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((got.get(i, j) - v).abs() < 1e-12);
        }
    }
}

#[test]
fn guided_scores_match_entrywise_oracle() {
    let mut draws = Draws::new(99);
    let inst = Instance::random(&mut draws, 7, 5).unwrap();
    let w = &inst.weights;
    let bundle = run_sgf(&inst.e_f, &inst.e_b, &inst.e_r, &inst.c_f, &inst.c_b, &inst.c_r, w).unwrap();
    let q = inst.e_f.concat_cols(&inst.c_f).unwrap();
    let k = inst.e_b.concat_rows(&inst.e_r).unwrap().concat_cols(&inst.c_b.concat_rows(&inst.c_r).unwrap()).unwrap();
    let want = oracle_weights(&q, &k, w);
    for (i, row) in want.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((bundle.weights.get(i, j) - v).abs() < TOLERANCE);
        }
    }
}

#[test]
fn extended_with_reference_is_vanilla_over_stacked_tokens() {
    let dims = SgfDims { d_e: 4, d_c: 2, d_proj: 6 };
    let w = init_weights(3, dims, AttentionMode::Extended).unwrap();
    let (e_f, e_b, e_r) = (mat(3, 4, 5), mat(5, 4, 6), mat(2, 4, 7));
    let ext = attention_extended(&e_f, &e_b, &e_r, &w).unwrap();
    let van = attention_vanilla(&e_f, &e_b.concat_rows(&e_r).unwrap(), &w).unwrap();
    assert_eq!(ext, van);
}

#[test]
fn misaligned_guidance_is_rejected() {
    let dims = SgfDims { d_e: 2, d_c: 2, d_proj: 2 };
    let w = init_weights(0, dims, AttentionMode::Sgf).unwrap();
    let err = attention_sgf(&mat(3, 2, 1), &mat(4, 2, 2), &mat(1, 2, 3), &mat(3, 2, 4), &mat(3, 2, 5), &mat(1, 2, 6), &w);
    assert!(matches!(err, Err(harmony_core::Error::GuidanceMisaligned(_))));
}

#[test]
fn uniform_scores_give_uniform_weights() {
    let s = Matrix::zeros(3, 4);
    let w = softmax_rows(&s);
    assert!(w.data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
}

#[test]
fn dump_writes_raif_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = golden_bundle().unwrap();
    bundle.dump(dir.path()).unwrap();
    let blob = RaifBlob::read(dir.path().join("weights.raif")).unwrap();
    assert_eq!(blob.rows as usize, bundle.weights.rows());
    assert_eq!(blob.dim as usize, bundle.weights.cols());
    for (a, b) in blob.data.iter().zip(bundle.weights.data()) {
        assert_eq!(*a, *b as f32);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bundle.json")).unwrap()).unwrap();
    assert_eq!(manifest["modulated"]["cols"], 3);
}

#[test]
fn pooling_nested_grids() {
    let tokens = Matrix::from_fn(16, 1, |i, _| i as f64);
    let pooled = pool_tokens(&tokens, 4, 4, 2, 2).unwrap();
    assert_eq!(pooled.data(), &[2.5, 4.5, 10.5, 12.5]);
    let (e, g, shape) = align_tokens((&tokens, 4, 4), (&Matrix::zeros(4, 3), 2, 2)).unwrap();
    assert_eq!(shape, (2, 2));
    assert_eq!((e.rows(), g.rows()), (4, 4));
    assert!(align_tokens((&tokens, 4, 4), (&Matrix::zeros(6, 3), 2, 3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_distributions(seed in any::<u64>(), f in 1usize..8, b in 1usize..8, r in 0usize..8) {
        let dims = SgfDims { d_e: 3, d_c: 2, d_proj: 4 };
        let w = init_weights(seed % 1000, dims, AttentionMode::Sgf).unwrap();
        let bundle = run_sgf(&mat(f, 3, seed), &mat(b, 3, seed ^ 1), &mat(r, 3, seed ^ 2),
            &mat(f, 2, seed ^ 3), &mat(b, 2, seed ^ 4), &mat(r, 2, seed ^ 5), &w).unwrap();
        for i in 0..f {
            let row = bundle.weights.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        prop_assert_eq!(bundle.modulated.shape(), (f, 3));
    }

    #[test]
    fn shifting_a_row_leaves_softmax_unchanged(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let s = mat(3, 5, seed);
        let shifted = Matrix::from_fn(3, 5, |i, j| s.get(i, j) + shift);
        prop_assert!(softmax_rows(&s).max_abs_diff(&softmax_rows(&shifted)) < 1e-12);
    }
}
