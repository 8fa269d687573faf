//! Reference augmentation (crop, flip, resize) and training-manifest mixing.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::ContentProvider;
use crate::imageio::{BoundingBox, DatasetManifest, ForegroundMask, Image};
use crate::retrieval::{retrieve, GalleryIndex, RetrievalConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub seed: u64,
    pub flip_prob: f64,
    pub min_crop_frac: f64,
    pub out_size: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            flip_prob: 0.5,
            min_crop_frac: 0.6,
            out_size: 256,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_crop_frac > 0.0 && self.min_crop_frac <= 1.0) {
            return Err(Error::Config(format!("min_crop_frac = {} must lie in (0, 1]", self.min_crop_frac)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob = {} must lie in [0, 1]", self.flip_prob)));
        }
        if self.out_size == 0 {
            return Err(Error::Config("out_size must be positive".into()));
        }
        Ok(())
    }
}

/// First eight bytes of SHA-256 of the sample id.
pub fn sample_hash(sample_id: &str) -> u64 {
    let digest = Sha256::digest(sample_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Counter-keyed generator: the same key always yields the same stream,
/// independent of how many other keys were used before it.
pub fn keyed_rng(seed: u64, sample_id: &str, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sample_hash(sample_id).to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform double in `[0, 1)` with 53 random bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Unbiased uniform integer in `[0, n)`.
pub fn below(rng: &mut impl RngCore, n: u64) -> u64 {
    assert!(n > 0, "empty range");
    let zone = u64::MAX - (u64::MAX - n + 1) % n;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return v % n;
        }
    }
}

/// Crop window in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    /// No square window satisfied the constraints; the full image was used.
    pub degenerate: bool,
}

impl CropWindow {
    pub fn contains(&self, b: &BoundingBox) -> bool {
        self.x <= b.x0 && self.y <= b.y0 && self.x + self.width >= b.x1 && self.y + self.height >= b.y1
    }
}

fn placements(extent: u32, side: u32, lo: u32, hi: u32) -> (u32, u32) {
    // start positions s with s <= lo and s + side >= hi, inside [0, extent - side]
    let first = hi.saturating_sub(side);
    let last = lo.min(extent - side);
    (first, last)
}

/// Smallest admissible crop side for a `width x height` image.
pub fn min_side(width: u32, height: u32, min_crop_frac: f64) -> u32 {
    ((min_crop_frac * width.min(height) as f64).ceil() as u32).clamp(1, width.min(height))
}

/// Draws a square window uniformly among all windows that contain `bbox`
/// and whose side is at least `min_crop_frac * min(width, height)`.
pub fn sample_crop(width: u32, height: u32, bbox: &BoundingBox, min_crop_frac: f64, rng: &mut impl RngCore) -> CropWindow {
    let smax = width.min(height);
    let smin = min_side(width, height, min_crop_frac).max(bbox.width()).max(bbox.height());
    let count = |s: u32| {
        let (fx, lx) = placements(width, s, bbox.x0, bbox.x1);
        let (fy, ly) = placements(height, s, bbox.y0, bbox.y1);
        if lx < fx || ly < fy {
            0
        } else {
            (lx - fx + 1) as u64 * (ly - fy + 1) as u64
        }
    };
    let total: u64 = (smin..=smax).map(count).sum();
    if total == 0 {
        return CropWindow {
            x: 0,
            y: 0,
            width,
            height,
            degenerate: true,
        };
    }
    let mut k = below(rng, total);
    for s in smin..=smax {
        let n = count(s);
        if k >= n {
            k -= n;
            continue;
        }
        let (fx, lx) = placements(width, s, bbox.x0, bbox.x1);
        let (fy, _) = placements(height, s, bbox.y0, bbox.y1);
        let nx = (lx - fx + 1) as u64;
        return CropWindow {
            x: fx + (k % nx) as u32,
            y: fy + (k / nx) as u32,
            width: s,
            height: s,
            degenerate: false,
        };
    }
    unreachable!("draw below total always lands in some side")
}

#[derive(Debug, Clone)]
pub struct AugmentedReference {
    pub image: Image,
    pub window: CropWindow,
    pub flipped: bool,
}

/// Crop (containing the foreground box), optional horizontal flip and
/// bilinear resize of a target image.
pub fn augment_reference(
    target: &Image,
    mask: &ForegroundMask,
    sample_id: &str,
    cfg: &AugmentConfig,
    draw_index: u64,
) -> Result<AugmentedReference> {
    cfg.validate()?;
    if target.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{sample_id}: target {:?} vs mask {:?}",
            target.dims(),
            mask.dims()
        )));
    }
    let bbox = mask.bounding_box().ok_or_else(|| Error::EmptyForeground(sample_id.to_string()))?;
    let mut rng = keyed_rng(cfg.seed, sample_id, draw_index);
    let window = sample_crop(target.width(), target.height(), &bbox, cfg.min_crop_frac, &mut rng);
    if window.degenerate {
        log::warn!("{sample_id}: foreground box {bbox:?} admits no square crop, using the full image");
    }
    let flipped = unit_f64(&mut rng) < cfg.flip_prob;
    let mut image = target
        .crop(window.x, window.y, window.width, window.height)?
        .resize_bilinear(cfg.out_size, cfg.out_size);
    if flipped {
        image = image.flip_horizontal();
    }
    Ok(AugmentedReference { image, window, flipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    NonReference,
    Retrieved,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingEntry {
    pub sample: String,
    pub mode: TrainingMode,
    /// Gallery id for `retrieved`, `augment:<sample>` for `augmented`.
    pub reference: Option<String>,
    /// Drawn as `retrieved` but retrieval came back empty.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub mix_seed: u64,
    pub entries: Vec<TrainingEntry>,
}

impl TrainingManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::imageio::ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("training manifest", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, mode: TrainingMode) -> usize {
        self.entries.iter().filter(|e| e.mode == mode).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub mix_seed: u64,
    pub p_nonref: f64,
    pub p_retrieved_given_ref: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            mix_seed: 0,
            p_nonref: 0.5,
            p_retrieved_given_ref: 0.5,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_nonref", self.p_nonref), ("p_retrieved_given_ref", self.p_retrieved_given_ref)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

// Mode draws use a counter outside the range used for augmentation draws.
const MIX_COUNTER: u64 = u64::MAX;

/// Assigns a mode (and reference) to every sample from its retrieved ids.
pub fn assign_modes(samples: &[(String, Vec<String>)], mix: &MixConfig) -> Result<TrainingManifest> {
    mix.validate()?;
    let p_retrieved = (1.0 - mix.p_nonref) * mix.p_retrieved_given_ref;
    let entries = samples
        .iter()
        .map(|(id, retrieved)| {
            let mut rng = keyed_rng(mix.mix_seed, id, MIX_COUNTER);
            let u = unit_f64(&mut rng);
            let augmented = |fallback| TrainingEntry {
                sample: id.clone(),
                mode: TrainingMode::Augmented,
                reference: Some(format!("augment:{id}")),
                fallback,
            };
            if u < mix.p_nonref {
                return TrainingEntry {
                    sample: id.clone(),
                    mode: TrainingMode::NonReference,
                    reference: None,
                    fallback: false,
                };
            }
            if u < mix.p_nonref + p_retrieved {
                let usable: Vec<&String> = retrieved.iter().filter(|r| *r != id).collect();
                if usable.is_empty() {
                    return augmented(true);
                }
                let pick = usable[below(&mut rng, usable.len() as u64) as usize];
                return TrainingEntry {
                    sample: id.clone(),
                    mode: TrainingMode::Retrieved,
                    reference: Some(pick.clone()),
                    fallback: false,
                };
            }
            augmented(false)
        })
        .collect();
    Ok(TrainingManifest {
        mix_seed: mix.mix_seed,
        entries,
    })
}

/// Runs retrieval for every sample, then assigns training modes.
pub fn build_training_manifest(
    dataset: &DatasetManifest,
    index: &GalleryIndex,
    provider: &dyn ContentProvider,
    retrieval_cfg: &RetrievalConfig,
    mix: &MixConfig,
) -> Result<TrainingManifest> {
    let lookup = |entry: &crate::imageio::ManifestEntry| -> Result<(String, Vec<String>)> {
        if index.is_empty() {
            return Ok((entry.id.clone(), Vec::new()));
        }
        let sample = dataset.load_sample(entry, Some(index.working_size))?;
        let ids = retrieve(&sample, index, provider, retrieval_cfg)?
            .into_iter()
            .map(|r| r.reference_id)
            .collect();
        Ok((entry.id.clone(), ids))
    };
    #[cfg(feature = "parallel")]
    let lists: Result<Vec<_>> = {
        use rayon::prelude::*;
        dataset.entries.par_iter().map(lookup).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let lists: Result<Vec<_>> = dataset.entries.iter().map(lookup).collect();
    assign_modes(&lists?, mix)
}
