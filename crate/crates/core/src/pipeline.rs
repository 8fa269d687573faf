//! Benchmark construction and the synthetic fixture corpus.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{below, unit_f64};
use crate::error::{Error, Result};
use crate::features::{hsv_to_rgb_pixel, ContentProvider};
use crate::imageio::{
    load_manifest, save_image, save_mask, DatasetManifest, ForegroundMask, GalleryItem, Image, ManifestEntry,
};
use crate::retrieval::{build_index_from, hex, retrieve, GalleryIndex, RetrievalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryPolicy {
    /// Every sample's target image joins the gallery under the sample's id.
    TargetsAsGallery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub source_manifest: PathBuf,
    pub gallery_policy: GalleryPolicy,
    pub retrieval: RetrievalConfig,
    pub output_dir: PathBuf,
    pub patch_size: u32,
    pub working_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedSample {
    pub id: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub manifest: DatasetManifest,
    pub retained: Vec<RetainedSample>,
    pub index: GalleryIndex,
}

/// Gallery made of the dataset's target images.
pub fn targets_gallery(dataset: &DatasetManifest) -> Result<Vec<GalleryItem>> {
    dataset
        .entries
        .iter()
        .map(|e| {
            let image = e
                .target
                .clone()
                .ok_or_else(|| Error::Schema(format!("sample {} has no target for the gallery", e.id)))?;
            Ok(GalleryItem { id: e.id.clone(), image })
        })
        .collect()
}

/// Samples whose retrieval against `index` is non-empty, in manifest order.
pub fn retained_samples(
    dataset: &DatasetManifest,
    index: &GalleryIndex,
    provider: &dyn ContentProvider,
    cfg: &RetrievalConfig,
) -> Result<Vec<RetainedSample>> {
    let one = |entry: &ManifestEntry| -> Result<Option<RetainedSample>> {
        let sample = dataset.load_sample(entry, Some(index.working_size))?;
        let refs: Vec<String> = retrieve(&sample, index, provider, cfg)?
            .into_iter()
            .map(|r| r.reference_id)
            .collect();
        Ok((!refs.is_empty()).then(|| RetainedSample {
            id: entry.id.clone(),
            references: refs,
        }))
    };
    #[cfg(feature = "parallel")]
    let found: Result<Vec<_>> = {
        use rayon::prelude::*;
        dataset.entries.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let found: Result<Vec<_>> = dataset.entries.iter().map(one).collect();
    Ok(found?.into_iter().flatten().collect())
}

/// Re-organizes a non-reference dataset into one where every sample has at
/// least one retrievable reference among the other samples' targets.
pub fn build_benchmark(spec: &BenchmarkSpec, provider: &dyn ContentProvider) -> Result<Benchmark> {
    spec.retrieval.validate()?;
    let dataset = load_manifest(&spec.source_manifest)?;
    let gallery = match spec.gallery_policy {
        GalleryPolicy::TargetsAsGallery => targets_gallery(&dataset)?,
    };
    let items: Vec<(&str, &Path)> = gallery.iter().map(|g| (g.id.as_str(), g.image.as_path())).collect();
    let index = build_index_from(&items, provider, spec.patch_size, spec.working_size)?;
    let retained = retained_samples(&dataset, &index, provider, &spec.retrieval)?;
    let keep: std::collections::HashSet<&str> = retained.iter().map(|r| r.id.as_str()).collect();
    let manifest = DatasetManifest {
        root: dataset.root.clone(),
        entries: dataset.entries.iter().filter(|e| keep.contains(e.id.as_str())).cloned().collect(),
        gallery,
    };
    let out = &spec.output_dir;
    manifest.save(out.join("manifest.json"))?;
    let path = out.join("retrievals.json");
    let text = serde_json::to_string_pretty(&retained).map_err(|e| Error::json("retrievals", e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    index.save(out.join("index"))?;
    Ok(Benchmark {
        manifest,
        retained,
        index,
    })
}

/// Side length of every fixture image.
pub const FIXTURE_SIZE: u32 = 128;
/// V-channel gains applied to the textured scenes' gallery variants.
pub const GAIN_LEVELS: [f64; 5] = [0.5, 0.75, 1.0, 1.33, 2.0];
pub const TEXTURED_SCENES: usize = 8;
pub const DUPLICATE_SCENES: usize = 10;
pub const FLAT_SAMPLES: usize = 32;
pub const ABLATION_CASES: usize = 10;

pub fn gain_tag(gain: f64) -> String {
    format!("g{:03}", (gain * 100.0).round() as u32)
}

/// Gallery id of textured scene `k` at `gain`.
pub fn textured_gallery_id(k: usize, gain: f64) -> String {
    format!("tex{k:02}_{}", gain_tag(gain))
}

pub fn textured_sample_id(k: usize) -> String {
    format!("tex{k:02}")
}

/// Manifests written by [`make_fixtures`], already resolved.
#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub dir: PathBuf,
    /// 50 samples and 50 gallery images.
    pub main: DatasetManifest,
    /// Guidance-only-in-reference cases with their references and distractors.
    pub ablation: DatasetManifest,
    /// Mutually dissimilar flat images.
    pub orthogonal: DatasetManifest,
    /// Pairs of samples sharing an identical target.
    pub duplicates: DatasetManifest,
    pub checksums: BTreeMap<String, String>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    hsv_to_rgb_pixel([h.rem_euclid(360.0), s, v.clamp(0.0, 1.0)])
}

fn rect_mask(x0: u32, y0: u32, w: u32, h: u32) -> ForegroundMask {
    ForegroundMask::rect(FIXTURE_SIZE, FIXTURE_SIZE, x0, y0, x0 + w, y0 + h)
}

/// Scales V of an image that was painted in HSV.
fn value_gain(img: &Image, gain: f64) -> Image {
    img.map_pixels(|_, _, px| {
        let [h, s, v] = crate::features::rgb_to_hsv_pixel(px);
        hsv_to_rgb_pixel([h, s, (v * gain).min(1.0)])
    })
}

fn paint(f: impl FnMut(u32, u32) -> [f64; 3]) -> Image {
    Image::from_fn(FIXTURE_SIZE, FIXTURE_SIZE, f).expect("fixture dims")
}

fn composite_of(target: &Image, mask: &ForegroundMask, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
    target.map_pixels(|x, y, px| if mask.get(x, y) { f(px) } else { px })
}

/// Textured scene `k`: horizontal-stripe background, vertical-stripe object
/// on a patch-aligned 48x48 block. Both textures repeat every 4 px, so each
/// 16 px patch holds equal shares of the two value levels.
pub fn textured_scene(k: usize) -> (Image, ForegroundMask) {
    let bg_hue = 15.0 + 30.0 * k as f64;
    let obj_hue = 15.0 + 30.0 * ((k + 6) % 12) as f64;
    let (x0, y0) = (16 * (1 + (k % 4) as u32), 16 * (1 + 3 * (k / 4) as u32));
    let mask = rect_mask(x0, y0, 48, 48);
    let img = paint(|x, y| {
        if mask.get(x, y) {
            hsv(obj_hue, 0.6, if x % 4 < 2 { 0.4 } else { 0.2 })
        } else {
            hsv(bg_hue, 0.6, if y % 4 < 2 { 0.4 } else { 0.2 })
        }
    });
    (img, mask)
}

/// Reference-ablation case `k`: the object's only look-alike is in the
/// reference image, which shares the background but moves the object.
pub struct AblationCase {
    pub target: Image,
    pub composite: Image,
    pub mask: ForegroundMask,
    pub reference: Image,
    pub distractor: Image,
}

pub fn ablation_case(k: usize, rng: &mut impl RngCore) -> AblationCase {
    let bg_hue = 10.0 + 36.0 * k as f64;
    let obj_hue = bg_hue + 150.0;
    let background = |_x: u32, y: u32| hsv(bg_hue, 0.55, if y % 4 < 2 { 0.5 } else { 0.3 });
    let object = |x: u32, y: u32| hsv(obj_hue, 0.7, if (x + y) % 4 < 2 { 0.6 } else { 0.35 });
    fn cell(rng: &mut impl RngCore, span: u32) -> u32 {
        16 * below(rng, (FIXTURE_SIZE / 16 - span + 1) as u64) as u32
    }
    let (x0, y0) = (cell(rng, 3), cell(rng, 3));
    let mask = rect_mask(x0, y0, 48, 48);
    let target = paint(|x, y| if mask.get(x, y) { object(x, y) } else { background(x, y) });
    let (gain, offset) = (1.2 + 0.2 * unit_f64(rng), 0.03 + 0.05 * unit_f64(rng));
    let composite = composite_of(&target, &mask, |px| px.map(|v| v * gain + offset));
    let (rx, ry) = (cell(rng, 4), cell(rng, 4));
    let ref_mask = rect_mask(rx, ry, 64, 64);
    let reference = paint(|x, y| if ref_mask.get(x, y) { object(x, y) } else { background(x, y) });
    let d_hue = bg_hue + 75.0;
    let distractor = paint(|x, y| {
        if (32..96).contains(&x) && (32..96).contains(&y) {
            hsv(d_hue + 120.0, 0.5, if (x / 4 + y / 4) % 2 == 0 { 0.7 } else { 0.3 })
        } else {
            hsv(d_hue, 0.6, if x % 4 < 2 { 0.45 } else { 0.25 })
        }
    });
    AblationCase {
        target,
        composite,
        mask,
        reference,
        distractor,
    }
}

struct Writer {
    dir: PathBuf,
    checksums: BTreeMap<String, String>,
}

impl Writer {
    fn image(&mut self, name: &str, img: &Image) -> Result<PathBuf> {
        let rel = PathBuf::from("images").join(format!("{name}.png"));
        save_image(img, self.dir.join(&rel))?;
        self.record(&rel)?;
        Ok(rel)
    }

    fn mask(&mut self, name: &str, mask: &ForegroundMask) -> Result<PathBuf> {
        let rel = PathBuf::from("images").join(format!("{name}_mask.png"));
        save_mask(mask, self.dir.join(&rel))?;
        self.record(&rel)?;
        Ok(rel)
    }

    fn sample(&mut self, id: &str, composite: &Image, mask: &ForegroundMask, target: &Image) -> Result<ManifestEntry> {
        Ok(ManifestEntry {
            id: id.to_string(),
            composite: self.image(&format!("{id}_composite"), composite)?,
            mask: self.mask(id, mask)?,
            target: Some(self.image(&format!("{id}_target"), target)?),
        })
    }

    fn gallery(&mut self, id: &str, img: &Image) -> Result<GalleryItem> {
        Ok(GalleryItem {
            id: id.to_string(),
            image: self.image(id, img)?,
        })
    }

    fn manifest(&mut self, name: &str, entries: Vec<ManifestEntry>, gallery: Vec<GalleryItem>) -> Result<DatasetManifest> {
        let m = DatasetManifest {
            root: PathBuf::from("."),
            entries,
            gallery,
        };
        let rel = PathBuf::from(format!("{name}.json"));
        m.save(self.dir.join(&rel))?;
        self.record(&rel)?;
        load_manifest(self.dir.join(rel))
    }

    fn record(&mut self, rel: &Path) -> Result<()> {
        let path = self.dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let key = rel.to_string_lossy().replace('\\', "/");
        self.checksums.insert(key, hex(&Sha256::digest(&bytes)));
        Ok(())
    }
}

/// Writes the synthetic corpus used by the tests into `out_dir`:
/// `main.json`, `ablation.json`, `orthogonal.json`, `duplicates.json`,
/// the images they reference and `checksums.json`.
pub fn make_fixtures(out_dir: impl AsRef<Path>, seed: u64) -> Result<FixtureSet> {
    let dir = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Writer {
        dir: dir.clone(),
        checksums: BTreeMap::new(),
    };

    let (mut entries, mut gallery) = (Vec::new(), Vec::new());
    for k in 0..TEXTURED_SCENES {
        let (target, mask) = textured_scene(k);
        let composite = composite_of(&target, &mask, |px| {
            let [h, s, v] = crate::features::rgb_to_hsv_pixel(px);
            hsv_to_rgb_pixel([h, s, v * 0.85])
        });
        entries.push(w.sample(&textured_sample_id(k), &composite, &mask, &target)?);
        for gain in GAIN_LEVELS {
            gallery.push(w.gallery(&textured_gallery_id(k, gain), &value_gain(&target, gain))?);
        }
    }

    let mut dup_samples = Vec::new();
    for j in 0..DUPLICATE_SCENES {
        let bg_hue = 20.0 + 36.0 * j as f64;
        let obj_hue = bg_hue + 120.0 + 20.0 * unit_f64(&mut rng);
        let span = 2 + below(&mut rng, 3) as u32;
        let x0 = 16 * below(&mut rng, (8 - span + 1) as u64) as u32;
        let y0 = 16 * below(&mut rng, (8 - span + 1) as u64) as u32;
        let mask = rect_mask(x0, y0, 16 * span, 16 * span);
        let target = paint(|x, y| {
            if mask.get(x, y) {
                hsv(obj_hue, 0.65, if (x / 2 + y / 2) % 2 == 0 { 0.7 } else { 0.35 })
            } else {
                hsv(bg_hue, 0.5, if (x + y) % 4 < 2 { 0.6 } else { 0.3 })
            }
        });
        let gains = [0.75 + 0.5 * unit_f64(&mut rng), 0.75 + 0.5 * unit_f64(&mut rng), 0.75 + 0.5 * unit_f64(&mut rng)];
        let composite = composite_of(&target, &mask, |px| [px[0] * gains[0], px[1] * gains[1], px[2] * gains[2]].map(|v| v.min(1.0)));
        let id = format!("dup{j:02}");
        let entry = w.sample(&id, &composite, &mask, &target)?;
        gallery.push(w.gallery(&format!("{id}_copy"), &target)?);
        dup_samples.push(entry.clone());
        entries.push(entry);
    }

    for i in 0..FLAT_SAMPLES {
        let mut color = || [unit_f64(&mut rng), unit_f64(&mut rng), unit_f64(&mut rng)].map(|v| 0.1 + 0.8 * v);
        let (bg, fg) = (color(), color());
        let shift = color().map(|v| (v - 0.5) * 0.5);
        let fw = 32 + below(&mut rng, 33) as u32;
        let fh = 32 + below(&mut rng, 33) as u32;
        let x0 = below(&mut rng, (FIXTURE_SIZE - fw + 1) as u64) as u32;
        let y0 = below(&mut rng, (FIXTURE_SIZE - fh + 1) as u64) as u32;
        let mask = rect_mask(x0, y0, fw, fh);
        let target = paint(|x, y| if mask.get(x, y) { fg } else { bg });
        let composite = composite_of(&target, &mask, |px| [0, 1, 2].map(|c| (px[c] + shift[c]).clamp(0.0, 1.0)));
        entries.push(w.sample(&format!("flat{i:02}"), &composite, &mask, &target)?);
    }
    let main = w.manifest("main", entries, gallery)?;

    let (mut entries, mut gallery) = (Vec::new(), Vec::new());
    for k in 0..ABLATION_CASES {
        let case = ablation_case(k, &mut rng);
        let id = format!("abl{k:02}");
        entries.push(w.sample(&id, &case.composite, &case.mask, &case.target)?);
        gallery.push(w.gallery(&format!("{id}_ref"), &case.reference)?);
        gallery.push(w.gallery(&format!("{id}_distractor"), &case.distractor)?);
    }
    let ablation = w.manifest("ablation", entries, gallery)?;

    let mut entries = Vec::new();
    for (name, rgb) in [("red", [1.0, 0.0, 0.0]), ("green", [0.0, 1.0, 0.0]), ("blue", [0.0, 0.0, 1.0]), ("black", [0.0; 3])] {
        let img = Image::filled(FIXTURE_SIZE, FIXTURE_SIZE, rgb)?;
        entries.push(w.sample(&format!("flat_{name}"), &img, &rect_mask(32, 32, 64, 64), &img)?);
    }
    let orthogonal = w.manifest("orthogonal", entries, Vec::new())?;

    let mut entries = Vec::new();
    for e in dup_samples.iter().take(4) {
        for suffix in ["a", "b"] {
            let mut twin = e.clone();
            twin.id = format!("{}{suffix}", e.id);
            entries.push(twin);
        }
    }
    let duplicates = w.manifest("duplicates", entries, Vec::new())?;

    let path = dir.join("checksums.json");
    let text = serde_json::to_string_pretty(&w.checksums).map_err(|e| Error::json("checksums", e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(FixtureSet {
        dir,
        main,
        ablation,
        orthogonal,
        duplicates,
        checksums: w.checksums,
    })
}
