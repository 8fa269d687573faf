//! Desk-scale harmonization: attention-weighted statistical color transfer.
//!
//! Foreground patches attend over background (and optionally reference)
//! patches through the guided attention kernel. The attention mass each
//! value patch receives defines a mixture over patch color statistics, and
//! the foreground is mapped affinely onto that mixture's mean and spread.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    hsv_to_rgb_pixel, rgb_to_hsv_pixel, BuiltinProvider, ContentFeatureMap, ContentProvider, PatchGrid,
    DEFAULT_PATCH_SIZE,
};
use crate::imageio::{CompositeSample, ForegroundMask, Image, CHANNELS};
use crate::retrieval::foreground_patches;
use crate::sgf::{init_weights, run_sgf, AttentionBundle, AttentionMode, Matrix, ProjectionWeights, SgfDims};

/// Encoder token width: per-channel mean, std and mid-range.
pub const TOKEN_DIM: usize = 9;

const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Rgb,
    HsvVOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferStat {
    MeanStdAffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonizeConfig {
    pub use_reference: bool,
    pub color_space: ColorSpace,
    pub stat: TransferStat,
    pub clamp: bool,
    pub sgf_dims: SgfDims,
    pub seed: u64,
    pub patch_size: u32,
    pub tau_f: f64,
    /// Approximate logit scale given to guidance cosine similarity. Zero
    /// keeps the raw deterministic initialization for every weight.
    pub guidance_gain: f64,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            use_reference: true,
            color_space: ColorSpace::Rgb,
            stat: TransferStat::MeanStdAffine,
            clamp: true,
            sgf_dims: SgfDims {
                d_e: TOKEN_DIM,
                d_c: crate::features::BUILTIN_DIM,
                d_proj: 64,
            },
            seed: 0,
            patch_size: DEFAULT_PATCH_SIZE,
            tau_f: 0.5,
            guidance_gain: 20.0,
        }
    }
}

impl HarmonizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgf_dims.validate()?;
        if self.sgf_dims.d_e != TOKEN_DIM {
            return Err(Error::Config(format!(
                "d_e must be {TOKEN_DIM} for statistics tokens, got {}",
                self.sgf_dims.d_e
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if !(self.tau_f > 0.0 && self.tau_f <= 1.0) {
            return Err(Error::Config(format!("tau_f = {} must lie in (0, 1]", self.tau_f)));
        }
        if !(self.guidance_gain >= 0.0 && self.guidance_gain.is_finite()) {
            return Err(Error::Config(format!("guidance_gain = {} must be finite and >= 0", self.guidance_gain)));
        }
        if self.guidance_gain > 0.0 && self.sgf_dims.d_proj < self.sgf_dims.d_c {
            return Err(Error::Config(format!(
                "guidance_gain needs d_proj >= d_c ({} < {})",
                self.sgf_dims.d_proj, self.sgf_dims.d_c
            )));
        }
        Ok(())
    }
}

/// Per-patch raw statistics used as encoder features, one row per patch.
pub fn encode_tokens(img: &Image, grid: &PatchGrid) -> Result<Matrix> {
    if img.dims() != (grid.image_width, grid.image_height) {
        return Err(Error::ShapeMismatch(format!(
            "grid for {}x{} applied to {:?}",
            grid.image_width,
            grid.image_height,
            img.dims()
        )));
    }
    let inv = 1.0 / grid.area() as f64;
    let mut data = Vec::with_capacity(grid.len() * TOKEN_DIM);
    for p in 0..grid.len() {
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let mut lo = [f64::INFINITY; CHANNELS];
        let mut hi = [f64::NEG_INFINITY; CHANNELS];
        for (x, y) in grid.pixels(p) {
            let px = img.pixel(x, y);
            for c in 0..CHANNELS {
                sum[c] += px[c];
                sq[c] += px[c] * px[c];
                lo[c] = lo[c].min(px[c]);
                hi[c] = hi[c].max(px[c]);
            }
        }
        let mean = sum.map(|s| s * inv);
        data.extend_from_slice(&mean);
        for c in 0..CHANNELS {
            data.push((sq[c] * inv - mean[c] * mean[c]).max(0.0).sqrt());
        }
        for c in 0..CHANNELS {
            data.push((lo[c] + hi[c]) * 0.5);
        }
    }
    Matrix::from_vec(grid.len(), TOKEN_DIM, data)
}

/// Deterministic weights whose guidance block scores patches by scaled
/// cosine similarity of their content descriptors.
///
/// Guidance rows of `w_query` and `w_key` become `s * [I | 0]` and the
/// encoder rows keep their initialized values only in the remaining
/// `d_proj - d_c` columns, so the two score terms do not mix. With
/// `s^2 = gain * sqrt(d_proj)` the guidance term equals `gain * cos`.
pub fn guided_weights(dims: SgfDims, seed: u64, gain: f64) -> Result<ProjectionWeights> {
    let base = init_weights(seed, dims, AttentionMode::Sgf)?;
    if gain == 0.0 {
        return Ok(base);
    }
    if dims.d_proj < dims.d_c {
        return Err(Error::Config(format!("d_proj {} < d_c {}", dims.d_proj, dims.d_c)));
    }
    let s = (gain * (dims.d_proj as f64).sqrt()).sqrt();
    let reshape = |m: &Matrix| {
        Matrix::from_fn(dims.d_e + dims.d_c, dims.d_proj, |i, j| {
            if i < dims.d_e {
                if j >= dims.d_c {
                    m.get(i, j)
                } else {
                    0.0
                }
            } else if j == i - dims.d_e {
                s
            } else {
                0.0
            }
        })
    };
    ProjectionWeights::new(
        AttentionMode::Sgf,
        dims,
        reshape(&base.w_query),
        reshape(&base.w_key),
        base.w_out,
    )
}

/// Mean and standard deviation per transfer channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HarmonizeOutput {
    pub image: Image,
    pub attention: AttentionBundle,
    pub foreground_stats: ChannelStats,
    pub target_stats: ChannelStats,
    /// Share of attention mass landing on reference patches.
    pub reference_mass: f64,
}

fn transfer_channels(px: [f64; 3], space: ColorSpace) -> Vec<f64> {
    match space {
        ColorSpace::Rgb => px.to_vec(),
        ColorSpace::HsvVOnly => vec![rgb_to_hsv_pixel(px)[2]],
    }
}

fn channel_count(space: ColorSpace) -> usize {
    match space {
        ColorSpace::Rgb => 3,
        ColorSpace::HsvVOnly => 1,
    }
}

/// Running first and second moments per channel.
#[derive(Clone)]
struct Moments {
    n: f64,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self {
            n: 0.0,
            sum: vec![0.0; k],
            sq: vec![0.0; k],
        }
    }

    fn add(&mut self, v: &[f64]) {
        self.n += 1.0;
        for (i, x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sq[i] += x * x;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n).collect()
    }

    fn second(&self) -> Vec<f64> {
        self.sq.iter().map(|s| s / self.n).collect()
    }

    fn stats(&self) -> ChannelStats {
        let mean = self.mean();
        let std = self.second().iter().zip(&mean).map(|(s, m)| (s - m * m).max(0.0).sqrt()).collect();
        ChannelStats { mean, std }
    }
}

fn patch_moments(
    img: &Image,
    grid: &PatchGrid,
    p: usize,
    skip: Option<&ForegroundMask>,
    space: ColorSpace,
) -> Moments {
    let mut m = Moments::new(channel_count(space));
    for (x, y) in grid.pixels(p) {
        if skip.is_some_and(|mask| mask.get(x, y)) {
            continue;
        }
        m.add(&transfer_channels(img.pixel(x, y), space));
    }
    m
}

/// Harmonizes with the built-in content descriptor as guidance.
pub fn harmonize(sample: &CompositeSample, reference: Option<&Image>, cfg: &HarmonizeConfig) -> Result<Image> {
    let reference = reference.map(|img| ("reference", img));
    Ok(harmonize_with(sample, reference, cfg, &BuiltinProvider)?.image)
}

/// Full harmonization pass. `reference` pairs an image with the id the
/// provider knows it by; it is resampled to the composite's size.
pub fn harmonize_with(
    sample: &CompositeSample,
    reference: Option<(&str, &Image)>,
    cfg: &HarmonizeConfig,
    provider: &dyn ContentProvider,
) -> Result<HarmonizeOutput> {
    cfg.validate()?;
    if sample.mask.count() == 0 {
        return Err(Error::EmptyForeground(sample.id.clone()));
    }
    let (w, h) = sample.dims();
    let space = cfg.color_space;

    let guide = provider.content(&sample.id, &sample.composite, cfg.patch_size)?;
    check_guidance(&guide, cfg)?;
    let grid = guide.grid;
    let tokens = encode_tokens(&sample.composite, &grid)?;
    let partition = match foreground_patches(&sample.mask, &grid, cfg.tau_f) {
        Ok(p) => p,
        Err(Error::EmptyForeground(_)) => foreground_patches(&sample.mask, &grid, 1.0 / grid.area() as f64)
            .map_err(|_| Error::EmptyForeground(sample.id.clone()))?,
        Err(e) => return Err(e),
    };
    let c_all = guidance_matrix(&guide)?;

    let e_f = tokens.select_rows(&partition.foreground);
    let c_f = c_all.select_rows(&partition.foreground);
    let e_b = tokens.select_rows(&partition.background);
    let c_b = c_all.select_rows(&partition.background);

    let mut value_moments: Vec<Moments> = partition
        .background
        .iter()
        .map(|&p| patch_moments(&sample.composite, &grid, p, Some(&sample.mask), space))
        .collect();

    let resized;
    let (e_r, c_r) = match reference.filter(|_| cfg.use_reference) {
        Some((ref_id, img)) => {
            resized = if img.dims() == (w, h) { img.clone() } else { img.resize_bilinear(w, h) };
            let ref_guide = provider.content(ref_id, &resized, cfg.patch_size)?;
            check_guidance(&ref_guide, cfg)?;
            if ref_guide.grid.shape() != grid.shape() {
                return Err(Error::GuidanceMisaligned(format!(
                    "reference grid {:?} vs composite grid {:?}",
                    ref_guide.grid.shape(),
                    grid.shape()
                )));
            }
            let all: Vec<usize> = (0..grid.len()).collect();
            value_moments.extend(all.iter().map(|&p| patch_moments(&resized, &grid, p, None, space)));
            (encode_tokens(&resized, &grid)?, guidance_matrix(&ref_guide)?)
        }
        None => (Matrix::zeros(0, TOKEN_DIM), Matrix::zeros(0, cfg.sgf_dims.d_c)),
    };

    let weights = guided_weights(cfg.sgf_dims, cfg.seed, cfg.guidance_gain)?;
    let attention = run_sgf(&e_f, &e_b, &e_r, &c_f, &c_b, &c_r, &weights)?;
    let mass = attention.column_mass();

    let k = channel_count(space);
    let (mut total, mut mean, mut second) = (0.0, vec![0.0; k], vec![0.0; k]);
    for (m, mom) in mass.iter().zip(&value_moments) {
        if mom.n == 0.0 {
            continue;
        }
        total += m;
        for (acc, v) in mean.iter_mut().zip(mom.mean()) {
            *acc += m * v;
        }
        for (acc, v) in second.iter_mut().zip(mom.second()) {
            *acc += m * v;
        }
    }
    let reference_mass = mass[partition.background.len()..].iter().sum::<f64>() / total.max(f64::MIN_POSITIVE);
    let target_stats = if total > 0.0 {
        let mean: Vec<f64> = mean.iter().map(|v| v / total).collect();
        let std = second
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / total - m * m).max(0.0).sqrt())
            .collect();
        ChannelStats { mean, std }
    } else {
        // no value patches at all: leave the foreground unchanged
        fg_moments(sample, space).stats()
    };
    let foreground_stats = fg_moments(sample, space).stats();

    let map = |v: f64, c: usize| {
        (v - foreground_stats.mean[c]) / foreground_stats.std[c].max(SIGMA_FLOOR) * target_stats.std[c]
            + target_stats.mean[c]
    };
    let mut data = sample.composite.data().to_vec();
    for y in 0..h {
        for x in 0..w {
            if !sample.mask.get(x, y) {
                continue;
            }
            let i = (y as usize * w as usize + x as usize) * CHANNELS;
            let px = [data[i], data[i + 1], data[i + 2]];
            let out = match space {
                ColorSpace::Rgb => [map(px[0], 0), map(px[1], 1), map(px[2], 2)],
                ColorSpace::HsvVOnly => {
                    let [hh, s, v] = rgb_to_hsv_pixel(px);
                    hsv_to_rgb_pixel([hh, s, map(v, 0).clamp(0.0, 1.0)])
                }
            };
            for c in 0..CHANNELS {
                data[i + c] = if cfg.clamp { out[c].clamp(0.0, 1.0) } else { out[c] };
            }
        }
    }
    let image = Image::new(w, h, data).map_err(|e| match e {
        Error::InvalidImage(msg) => Error::InvalidImage(format!("{msg} (clamping disabled)")),
        other => other,
    })?;
    Ok(HarmonizeOutput {
        image,
        attention,
        foreground_stats,
        target_stats,
        reference_mass,
    })
}

fn fg_moments(sample: &CompositeSample, space: ColorSpace) -> Moments {
    let mut m = Moments::new(channel_count(space));
    let (w, h) = sample.dims();
    for y in 0..h {
        for x in 0..w {
            if sample.mask.get(x, y) {
                m.add(&transfer_channels(sample.composite.pixel(x, y), space));
            }
        }
    }
    m
}

fn check_guidance(map: &ContentFeatureMap, cfg: &HarmonizeConfig) -> Result<()> {
    if map.dim != cfg.sgf_dims.d_c {
        return Err(Error::DimMismatch {
            expected: cfg.sgf_dims.d_c,
            found: map.dim,
        });
    }
    Ok(())
}

fn guidance_matrix(map: &ContentFeatureMap) -> Result<Matrix> {
    Matrix::from_vec(map.len(), map.dim, map.vectors.iter().map(|&v| v as f64).collect())
}
