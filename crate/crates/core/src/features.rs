//! Per-patch content descriptors and HSV appearance histograms.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::raif::{self, RaifBlob};

pub const DEFAULT_PATCH_SIZE: u32 = 16;

pub const HUE_BINS: usize = 12;
pub const SAT_BINS: usize = 4;
pub const VAL_BINS: usize = 4;
pub const APPEARANCE_DIM: usize = HUE_BINS * SAT_BINS * VAL_BINS;

pub const ORIENTATION_BINS: usize = 8;
pub const LUMA_BINS: usize = 8;
pub const BUILTIN_DIM: usize = 4 * ORIENTATION_BINS + LUMA_BINS + 6 + 2;
pub const BUILTIN_TAG: &str = "builtin-v1";

// Relative block weights inside the builtin descriptor.
const ORIENTATION_WEIGHT: f64 = 1.0;
const LUMA_WEIGHT: f64 = 0.5;

/// Tolerated drift of externally produced vectors before renormalization fails.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// Fixed tiling of an image into square patches; trailing pixels are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_width: u32,
    pub image_height: u32,
    pub patch_size: u32,
    pub rows: u32,
    pub cols: u32,
}

impl PatchGrid {
    pub fn new(image_width: u32, image_height: u32, patch_size: u32) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let rows = image_height / patch_size;
        let cols = image_width / patch_size;
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{image_width}x{image_height} image smaller than one {patch_size}px patch"
            )));
        }
        Ok(Self {
            image_width,
            image_height,
            patch_size,
            rows,
            cols,
        })
    }

    pub fn for_image(img: &Image, patch_size: u32) -> Result<Self> {
        Self::new(img.width(), img.height(), patch_size)
    }

    pub fn len(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (u32, u32) {
        (self.rows, self.cols)
    }

    /// Top-left pixel of patch `p` (row-major patch index).
    pub fn origin(&self, p: usize) -> (u32, u32) {
        let r = p as u32 / self.cols;
        let c = p as u32 % self.cols;
        (c * self.patch_size, r * self.patch_size)
    }

    pub fn area(&self) -> usize {
        (self.patch_size * self.patch_size) as usize
    }

    /// Pixel coordinates covered by patch `p`.
    pub fn pixels(&self, p: usize) -> impl Iterator<Item = (u32, u32)> {
        let (x0, y0) = self.origin(p);
        let s = self.patch_size;
        (y0..y0 + s).flat_map(move |y| (x0..x0 + s).map(move |x| (x, y)))
    }

    fn check(&self, img: &Image) -> Result<()> {
        if img.dims() != (self.image_width, self.image_height) {
            return Err(Error::ShapeMismatch(format!(
                "grid for {}x{} applied to {:?}",
                self.image_width,
                self.image_height,
                img.dims()
            )));
        }
        Ok(())
    }
}

/// Hexcone conversion. H in degrees `[0, 360)`, S and V in `[0, 1]`;
/// achromatic pixels get H = 0.
pub fn rgb_to_hsv_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return [0.0, s, max];
    }
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = if h >= 360.0 { h - 360.0 } else { h };
    [h, s, max]
}

pub fn hsv_to_rgb_pixel([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// HSV image with the same dimensions as its source.
#[derive(Debug, Clone, PartialEq)]
pub struct HsvImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl HsvImage {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

pub fn rgb_to_hsv(img: &Image) -> HsvImage {
    HsvImage {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(rgb_to_hsv_pixel).collect(),
    }
}

/// Joint HSV bin of a pixel, H-major then S then V.
#[inline]
pub fn hsv_bin([h, s, v]: [f64; 3]) -> usize {
    let hb = ((h / 30.0).floor() as usize).min(HUE_BINS - 1);
    let sb = ((s * 4.0).floor() as usize).min(SAT_BINS - 1);
    let vb = ((v * 4.0).floor() as usize).min(VAL_BINS - 1);
    (hb * SAT_BINS + sb) * VAL_BINS + vb
}

/// Per-patch 12x4x4 HSV joint histograms, each summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceFeatureMap {
    pub grid: PatchGrid,
    pub vectors: Vec<f32>,
}

impl AppearanceFeatureMap {
    pub fn vector(&self, p: usize) -> &[f32] {
        &self.vectors[p * APPEARANCE_DIM..(p + 1) * APPEARANCE_DIM]
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / APPEARANCE_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn to_raif(&self) -> RaifBlob {
        RaifBlob::new(
            self.grid.rows as usize,
            self.grid.cols as usize,
            APPEARANCE_DIM,
            self.vectors.clone(),
        )
        .expect("consistent shape")
    }

    pub fn from_raif(blob: RaifBlob, grid: PatchGrid) -> Result<Self> {
        if blob.dim as usize != APPEARANCE_DIM {
            return Err(Error::DimMismatch {
                expected: APPEARANCE_DIM,
                found: blob.dim as usize,
            });
        }
        if (blob.rows as u32, blob.cols as u32) != grid.shape() {
            return Err(Error::ShapeMismatch(format!(
                "appearance grid {}x{} vs {:?}",
                blob.rows,
                blob.cols,
                grid.shape()
            )));
        }
        Ok(Self {
            grid,
            vectors: blob.data,
        })
    }
}

pub fn compute_appearance(img: &Image, grid: &PatchGrid) -> Result<AppearanceFeatureMap> {
    grid.check(img)?;
    let hsv = rgb_to_hsv(img);
    let inv_area = 1.0 / grid.area() as f64;
    let mut vectors = Vec::with_capacity(grid.len() * APPEARANCE_DIM);
    for p in 0..grid.len() {
        let mut counts = [0u32; APPEARANCE_DIM];
        for (x, y) in grid.pixels(p) {
            counts[hsv_bin(hsv.get(x, y))] += 1;
        }
        vectors.extend(counts.iter().map(|&c| (c as f64 * inv_area) as f32));
    }
    Ok(AppearanceFeatureMap {
        grid: *grid,
        vectors,
    })
}

/// Per-patch content descriptors, each L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFeatureMap {
    pub grid: PatchGrid,
    pub dim: usize,
    pub vectors: Vec<f32>,
    pub provider_tag: String,
}

impl ContentFeatureMap {
    pub fn vector(&self, p: usize) -> &[f32] {
        &self.vectors[p * self.dim..(p + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.vectors.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_raif(&self) -> RaifBlob {
        RaifBlob::new(self.grid.rows as usize, self.grid.cols as usize, self.dim, self.vectors.clone())
            .expect("consistent shape")
    }
}

/// Rec. 601 luma.
#[inline]
pub fn luminance([r, g, b]: [f64; 3]) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Deterministic hand-crafted descriptor, 48 dims per patch:
/// 2x2 subcells of 8 orientation bins, an 8-bin luminance-weighted
/// histogram, RGB means and standard deviations, and two zero pads.
pub fn compute_builtin_content(img: &Image, grid: &PatchGrid) -> Result<ContentFeatureMap> {
    grid.check(img)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luma: Vec<f64> = img.pixels().map(luminance).collect();
    let at = |x: usize, y: usize| luma[y * w + x];

    // central differences with replicated borders
    let mut magnitude = vec![0.0; w * h];
    let mut orient_bin = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y)) * 0.5;
            let gy = (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1))) * 0.5;
            let m = (gx * gx + gy * gy).sqrt();
            let theta = gy.atan2(gx).rem_euclid(PI);
            let bin = ((theta / (PI / ORIENTATION_BINS as f64)).floor() as usize).min(ORIENTATION_BINS - 1);
            magnitude[y * w + x] = m;
            orient_bin[y * w + x] = bin as u8;
        }
    }

    let ps = grid.patch_size as usize;
    let area = grid.area() as f64;
    let mut vectors = Vec::with_capacity(grid.len() * BUILTIN_DIM);
    for p in 0..grid.len() {
        let mut v = [0.0f64; BUILTIN_DIM];
        let mut cell_pixels = [0usize; 4];
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        let (x0, y0) = grid.origin(p);
        for (x, y) in grid.pixels(p) {
            let (dx, dy) = ((x - x0) as usize, (y - y0) as usize);
            let cell = (dy * 2 / ps) * 2 + dx * 2 / ps;
            let i = y as usize * w + x as usize;
            cell_pixels[cell] += 1;
            v[cell * ORIENTATION_BINS + orient_bin[i] as usize] += magnitude[i];
            let l = luma[i];
            let lb = ((l * LUMA_BINS as f64).floor() as usize).min(LUMA_BINS - 1);
            v[4 * ORIENTATION_BINS + lb] += l;
            let px = img.pixel(x, y);
            for c in 0..3 {
                sum[c] += px[c];
                sum_sq[c] += px[c] * px[c];
            }
        }
        for cell in 0..4 {
            let n = cell_pixels[cell].max(1) as f64;
            for b in 0..ORIENTATION_BINS {
                v[cell * ORIENTATION_BINS + b] /= n;
            }
        }
        let orient = &mut v[..4 * ORIENTATION_BINS];
        let onorm = orient.iter().map(|x| x * x).sum::<f64>().sqrt();
        if onorm > 1e-12 {
            orient.iter_mut().for_each(|x| *x *= ORIENTATION_WEIGHT / onorm);
        } else {
            orient.iter_mut().for_each(|x| *x = 0.0);
        }
        let base = 4 * ORIENTATION_BINS;
        for b in 0..LUMA_BINS {
            v[base + b] *= LUMA_WEIGHT / area;
        }
        let base = base + LUMA_BINS;
        for c in 0..3 {
            let mean = sum[c] / area;
            let var = (sum_sq[c] / area - mean * mean).max(0.0);
            v[base + c] = mean;
            v[base + 3 + c] = var.sqrt();
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            vectors.push(1.0);
            vectors.extend(std::iter::repeat_n(0.0f32, BUILTIN_DIM - 1));
        } else {
            vectors.extend(v.iter().map(|x| (x / norm) as f32));
        }
    }
    Ok(ContentFeatureMap {
        grid: *grid,
        dim: BUILTIN_DIM,
        vectors,
        provider_tag: BUILTIN_TAG.to_string(),
    })
}

/// Cosine similarity accumulated in `f64` in index order, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_from_parts(dot(u, v), nu, nv))
}

#[inline]
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (a, b) in u.iter().zip(v) {
        acc += *a as f64 * *b as f64;
    }
    acc
}

#[inline]
pub fn l2_norm(u: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for a in u {
        acc += *a as f64 * *a as f64;
    }
    acc.sqrt()
}

#[inline]
pub(crate) fn cosine_from_parts(dot: f64, nu: f64, nv: f64) -> f64 {
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Writes a content map as RAIF plus sidecar.
pub fn store_content_features(map: &ContentFeatureMap, path: impl AsRef<Path>, image_id: &str) -> Result<()> {
    let path = path.as_ref();
    map.to_raif().write(path)?;
    raif::write_sidecar(
        path,
        &raif::Sidecar {
            image_id: image_id.to_string(),
            provider: map.provider_tag.clone(),
            patch_size: map.grid.patch_size,
        },
    )
}

/// Reads a RAIF content map, re-normalizing each vector.
///
/// Vectors already within 1e-6 of unit norm are kept bit-exact; drift up
/// to 1e-3 is corrected; anything else is a [`Error::Normalization`].
/// Without a sidecar the patch size falls back to `default_patch_size`.
pub fn load_content_features(path: impl AsRef<Path>, default_patch_size: u32) -> Result<ContentFeatureMap> {
    let path = path.as_ref();
    let blob = RaifBlob::read(path)?;
    let sidecar = raif::read_sidecar(path)?;
    let patch_size = sidecar.as_ref().map_or(default_patch_size, |s| s.patch_size);
    let provider_tag = sidecar
        .map(|s| s.provider)
        .unwrap_or_else(|| format!("file:{}", path.parent().unwrap_or(Path::new(".")).display()));
    let (rows, cols, dim) = (blob.rows as u32, blob.cols as u32, blob.dim as usize);
    if rows == 0 || cols == 0 || dim == 0 {
        return Err(Error::CorruptPayload(format!("empty feature map {rows}x{cols}x{dim}")));
    }
    let grid = PatchGrid::new(cols * patch_size, rows * patch_size, patch_size)?;
    let mut vectors = blob.data;
    renormalize(&mut vectors, dim)?;
    Ok(ContentFeatureMap {
        grid,
        dim,
        vectors,
        provider_tag,
    })
}

/// As [`load_content_features`], additionally requiring `expected_dim`.
pub fn load_content_features_with_dim(
    path: impl AsRef<Path>,
    default_patch_size: u32,
    expected_dim: usize,
) -> Result<ContentFeatureMap> {
    let map = load_content_features(path, default_patch_size)?;
    if map.dim != expected_dim {
        return Err(Error::DimMismatch {
            expected: expected_dim,
            found: map.dim,
        });
    }
    Ok(map)
}

fn renormalize(vectors: &mut [f32], dim: usize) -> Result<()> {
    for (index, v) in vectors.chunks_exact_mut(dim).enumerate() {
        let norm = l2_norm(v);
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Normalization { index, norm });
        }
        if (norm - 1.0).abs() > 1e-6 {
            v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
        }
    }
    Ok(())
}

/// Source of content descriptors for an image.
pub trait ContentProvider: Send + Sync {
    fn tag(&self) -> &str;

    /// Feature map for the image known as `id`, tiled at the image's size.
    fn content(&self, id: &str, image: &Image, patch_size: u32) -> Result<ContentFeatureMap>;
}

/// The deterministic hand-crafted descriptor.
#[derive(Debug, Default, Clone, Copy)]
pub struct BuiltinProvider;

impl ContentProvider for BuiltinProvider {
    fn tag(&self) -> &str {
        BUILTIN_TAG
    }

    fn content(&self, _id: &str, image: &Image, patch_size: u32) -> Result<ContentFeatureMap> {
        compute_builtin_content(image, &PatchGrid::for_image(image, patch_size)?)
    }
}

/// Reads externally exported features from `<dir>/<id>.raif`.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dir: PathBuf,
    tag: String,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        let tag = format!("file:{}", dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()));
        Self { dir, tag }
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.raif"))
    }
}

impl ContentProvider for FileProvider {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn content(&self, id: &str, image: &Image, patch_size: u32) -> Result<ContentFeatureMap> {
        let mut map = load_content_features(self.path_for(id), patch_size)?;
        // Re-express the stored grid in the query image's pixel frame.
        let (rows, cols) = map.grid.shape();
        if !image.width().is_multiple_of(cols) || !image.height().is_multiple_of(rows) || image.width() / cols != image.height() / rows {
            return Err(Error::ShapeMismatch(format!(
                "{id}: {rows}x{cols} feature grid does not tile a {:?} image",
                image.dims()
            )));
        }
        map.grid = PatchGrid::new(image.width(), image.height(), image.width() / cols)?;
        map.provider_tag = self.tag.clone();
        Ok(map)
    }
}
