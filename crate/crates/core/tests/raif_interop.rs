use std::path::PathBuf;

use harmony_core::features::{load_content_features, load_content_features_with_dim, ContentProvider, FileProvider};
use harmony_core::imageio::Image;
use harmony_core::raif::{read_sidecar, write_sidecar, RaifBlob, Sidecar, HEADER_LEN};
use harmony_core::Error;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[derive(serde::Deserialize)]
struct Expected {
    rows: usize,
    cols: usize,
    dim: usize,
    first_vector: Vec<f32>,
}

#[test]
fn externally_encoded_file_loads() {
    let path = fixture("ref_dvt_4x4x8.raif");
    let expected: Expected =
        serde_json::from_str(&std::fs::read_to_string(fixture("ref_dvt_4x4x8.expected.json")).unwrap()).unwrap();
    let blob = RaifBlob::read(&path).unwrap();
    assert_eq!((blob.rows as usize, blob.cols as usize, blob.dim as usize), (expected.rows, expected.cols, expected.dim));
    assert_eq!(&blob.data[..8], expected.first_vector.as_slice());
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, HEADER_LEN + 4 * 4 * 4 * 8);
    assert_eq!(blob.to_bytes(), std::fs::read(&path).unwrap());

    let map = load_content_features_with_dim(&path, 8, 8).unwrap();
    assert_eq!(map.provider_tag, "dvt-export");
    assert_eq!(map.grid.patch_size, 16);
    for v in map.vectors.chunks_exact(8) {
        let n: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-3);
    }
    assert!(matches!(load_content_features_with_dim(&path, 16, 48), Err(Error::DimMismatch { expected: 48, found: 8 })));
}

#[test]
fn malformed_headers_are_rejected() {
    let good = std::fs::read(fixture("ref_dvt_4x4x8.raif")).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(RaifBlob::from_bytes(&bad_magic), Err(Error::BadMagic)));
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert!(matches!(RaifBlob::from_bytes(&bad_version), Err(Error::VersionMismatch(2))));
    assert!(matches!(RaifBlob::from_bytes(&good[..good.len() - 1]), Err(Error::CorruptPayload(_))));
    assert!(matches!(RaifBlob::from_bytes(&good[..10]), Err(Error::CorruptPayload(_))));
}

#[test]
fn far_from_unit_vectors_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.raif");
    RaifBlob::new(1, 1, 2, vec![2.0, 0.0]).unwrap().write(&path).unwrap();
    assert!(matches!(load_content_features(&path, 16), Err(Error::Normalization { index: 0, .. })));
    RaifBlob::new(1, 1, 2, vec![1.0005, 0.0]).unwrap().write(&path).unwrap();
    assert_eq!(load_content_features(&path, 16).unwrap().vectors, vec![1.0, 0.0]);
}

#[test]
fn file_provider_rescales_grid_and_gives_unit_self_similarity() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture("ref_dvt_4x4x8.raif");
    for id in ["a", "b"] {
        let dst = dir.path().join(format!("{id}.raif"));
        std::fs::copy(&src, &dst).unwrap();
        write_sidecar(&dst, &Sidecar { image_id: id.into(), provider: "dvt-export".into(), patch_size: 16 }).unwrap();
    }
    assert_eq!(read_sidecar(&dir.path().join("a.raif")).unwrap().unwrap().image_id, "a");
    let provider = FileProvider::new(dir.path());
    let img = Image::filled(128, 128, [0.5; 3]).unwrap();
    let a = provider.content("a", &img, 16).unwrap();
    let b = provider.content("b", &img, 16).unwrap();
    assert_eq!(a.grid.patch_size, 32);
    for p in 0..16 {
        let cos: f64 = a.vector(p).iter().zip(b.vector(p)).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((cos - 1.0).abs() < 1e-5);
    }
    let odd = Image::filled(100, 128, [0.5; 3]).unwrap();
    assert!(matches!(provider.content("a", &odd, 16), Err(Error::ShapeMismatch(_))));
    assert!(matches!(provider.content("missing", &img, 16), Err(Error::FileNotFound(_))));
}

proptest! {
    #[test]
    fn bytes_round_trip(rows in 1usize..5, cols in 1usize..5, dim in 1usize..6, seed in any::<u32>()) {
        let data: Vec<f32> = (0..rows * cols * dim).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e9).collect();
        let blob = RaifBlob::new(rows, cols, dim, data).unwrap();
        let bytes = blob.to_bytes();
        prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * rows * cols * dim);
        prop_assert_eq!(RaifBlob::from_bytes(&bytes).unwrap(), blob);
    }
}
