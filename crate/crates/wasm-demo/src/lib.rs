//! Browser bindings for three interactive operations: generating a demo
//! scene, harmonizing it with or without a reference, and mapping patch
//! similarities. Images cross the boundary as RGBA bytes.

use harmony_core::augment::keyed_rng;
use harmony_core::features::{compute_appearance, compute_builtin_content, cosine, PatchGrid};
use harmony_core::harmonize::{harmonize_with, HarmonizeConfig};
use harmony_core::imageio::{CompositeSample, ForegroundMask, Image};
use harmony_core::metrics::foreground_mse;
use harmony_core::pipeline::{ablation_case, ABLATION_CASES};
use wasm_bindgen::prelude::*;

fn to_rgba(img: &Image) -> Vec<u8> {
    img.to_rgb8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn from_rgba(width: u32, height: u32, rgba: &[u8]) -> harmony_core::Result<Image> {
    let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    Image::from_rgb8(width, height, &rgb)
}

fn mask_from_rgba(width: u32, height: u32, rgba: &[u8]) -> harmony_core::Result<ForegroundMask> {
    let levels: Vec<bool> = rgba.chunks_exact(4).map(|p| p[0] >= 128).collect();
    ForegroundMask::new(width, height, levels)
}

fn mask_to_rgba(mask: &ForegroundMask) -> Vec<u8> {
    mask.data().iter().flat_map(|&m| if m { [255; 4] } else { [0, 0, 0, 255] }).collect()
}

fn js(e: harmony_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A generated composite whose object only appears in the reference.
#[wasm_bindgen]
pub struct DemoScene {
    width: u32,
    height: u32,
    composite: Vec<u8>,
    mask: Vec<u8>,
    target: Vec<u8>,
    reference: Vec<u8>,
}

#[wasm_bindgen]
impl DemoScene {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn composite(&self) -> Vec<u8> {
        self.composite.clone()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    pub fn target(&self) -> Vec<u8> {
        self.target.clone()
    }

    pub fn reference(&self) -> Vec<u8> {
        self.reference.clone()
    }
}

pub fn build_scene(index: u32, seed: u32) -> DemoScene {
    let k = index as usize % ABLATION_CASES;
    let mut rng = keyed_rng(seed as u64, "demo", k as u64);
    let case = ablation_case(k, &mut rng);
    DemoScene {
        width: case.target.width(),
        height: case.target.height(),
        composite: to_rgba(&case.composite),
        mask: mask_to_rgba(&case.mask),
        target: to_rgba(&case.target),
        reference: to_rgba(&case.reference),
    }
}

#[wasm_bindgen(js_name = demoScene)]
pub fn demo_scene(index: u32, seed: u32) -> DemoScene {
    build_scene(index, seed)
}

/// Harmonized RGBA plus the foreground MSE against `target` when given.
pub struct HarmonizeResult {
    pub rgba: Vec<u8>,
    pub foreground_mse: Option<f64>,
    pub reference_mass: f64,
}

pub fn run_harmonize(
    width: u32,
    height: u32,
    composite: &[u8],
    mask: &[u8],
    reference: Option<&[u8]>,
    target: Option<&[u8]>,
    guidance_gain: f64,
) -> harmony_core::Result<HarmonizeResult> {
    let mask = mask_from_rgba(width, height, mask)?;
    let target = target.map(|t| from_rgba(width, height, t)).transpose()?;
    let sample = CompositeSample::new("composite", from_rgba(width, height, composite)?, mask.clone(), target)?;
    let reference = reference.map(|r| from_rgba(width, height, r)).transpose()?;
    let cfg = HarmonizeConfig { guidance_gain, ..HarmonizeConfig::default() };
    let out = harmonize_with(
        &sample,
        reference.as_ref().map(|r| ("reference", r)),
        &cfg,
        &harmony_core::features::BuiltinProvider,
    )?;
    let foreground_mse = sample.target.as_ref().map(|t| foreground_mse(&out.image, t, &mask)).transpose()?;
    Ok(HarmonizeResult {
        rgba: to_rgba(&out.image),
        foreground_mse,
        reference_mass: out.reference_mass,
    })
}

/// Harmonized RGBA. Scores are available from [`harmonize_scores`].
#[wasm_bindgen(js_name = harmonize)]
pub fn harmonize_js(
    width: u32,
    height: u32,
    composite: &[u8],
    mask: &[u8],
    reference: Option<Vec<u8>>,
    guidance_gain: f64,
) -> Result<Vec<u8>, JsError> {
    run_harmonize(width, height, composite, mask, reference.as_deref(), None, guidance_gain)
        .map(|r| r.rgba)
        .map_err(js)
}

/// `[foreground MSE against target, attention mass on the reference]`.
#[wasm_bindgen(js_name = harmonizeScores)]
pub fn harmonize_scores(
    width: u32,
    height: u32,
    composite: &[u8],
    mask: &[u8],
    reference: Option<Vec<u8>>,
    target: &[u8],
    guidance_gain: f64,
) -> Result<Vec<f64>, JsError> {
    let r = run_harmonize(width, height, composite, mask, reference.as_deref(), Some(target), guidance_gain).map_err(js)?;
    Ok(vec![r.foreground_mse.unwrap_or(f64::NAN), r.reference_mass])
}

/// Cosines between the patch under `(x, y)` and every patch: content
/// similarities first, then appearance similarities.
pub fn patch_similarity(width: u32, height: u32, rgba: &[u8], patch: u32, x: u32, y: u32) -> harmony_core::Result<Vec<f32>> {
    let img = from_rgba(width, height, rgba)?;
    let grid = PatchGrid::new(width, height, patch)?;
    let (rows, cols) = grid.shape();
    let q = ((y / patch).min(rows - 1) * cols + (x / patch).min(cols - 1)) as usize;
    let content = compute_builtin_content(&img, &grid)?;
    let appearance = compute_appearance(&img, &grid)?;
    let mut out: Vec<f32> = (0..grid.len())
        .map(|p| cosine(content.vector(q), content.vector(p)).unwrap_or(0.0) as f32)
        .collect();
    out.extend((0..grid.len()).map(|p| cosine(appearance.vector(q), appearance.vector(p)).unwrap_or(0.0) as f32));
    Ok(out)
}

#[wasm_bindgen(js_name = patchSimilarity)]
pub fn patch_similarity_js(width: u32, height: u32, rgba: &[u8], patch: u32, x: u32, y: u32) -> Result<Vec<f32>, JsError> {
    patch_similarity(width, height, rgba, patch, x, y).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_round_trips_through_rgba() {
        let s = build_scene(3, 1);
        assert_eq!(s.composite.len(), (s.width * s.height * 4) as usize);
        let m = mask_from_rgba(s.width, s.height, &s.mask).unwrap();
        assert!(m.count() > 0);
        assert_eq!(mask_to_rgba(&m), s.mask);
    }

    #[test]
    fn reference_lowers_foreground_error() {
        let s = build_scene(0, 9);
        let run = |r: Option<&[u8]>| {
            run_harmonize(s.width, s.height, &s.composite, &s.mask, r, Some(&s.target), 20.0).unwrap()
        };
        let (with, without) = (run(Some(&s.reference)), run(None));
        assert!(with.foreground_mse.unwrap() < without.foreground_mse.unwrap());
        assert!(with.reference_mass > 0.5);
        assert_eq!(without.reference_mass, 0.0);
    }

    #[test]
    fn selected_patch_is_self_similar() {
        let s = build_scene(1, 2);
        let sims = patch_similarity(s.width, s.height, &s.composite, 16, 40, 70).unwrap();
        let n = sims.len() / 2;
        let q = (70 / 16) * (s.width / 16) as usize + 40 / 16;
        assert!((sims[q] - 1.0).abs() < 1e-6);
        assert!((sims[n + q] - 1.0).abs() < 1e-6);
        assert!(sims.iter().all(|v| (-1.0..=1.0 + 1e-6).contains(v)));
    }
}
