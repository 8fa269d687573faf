//! Images, masks, composite samples and dataset manifests.
//!
//! Pixels are held as `f64` in `[0, 1]`, row-major and channel-interleaved
//! RGB. Files are 8-bit PNG or binary PPM (P6).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Working resolution used by the pipeline before feature extraction.
pub const WORKING_SIZE: u32 = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("zero-sized image {width}x{height}")));
        }
        let expected = width as usize * height as usize * CHANNELS;
        if data.len() != expected {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Image filled with a single colour.
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Result<Self> {
        let n = width as usize * height as usize;
        let data = (0..n).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width as usize * height as usize * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = (y as usize * self.width as usize + x as usize) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(CHANNELS).map(|p| [p[0], p[1], p[2]])
    }

    /// Maps every pixel through `f`, clamping results into `[0, 1]`.
    pub fn map_pixels(&self, mut f: impl FnMut(u32, u32, [f64; 3]) -> [f64; 3]) -> Image {
        Image::from_fn(self.width, self.height, |x, y| f(x, y, self.pixel(x, y)))
            .expect("dimensions preserved")
    }

    /// Quantizes to 8-bit RGB bytes with `round(v * 255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Image {
        let w = self.width;
        Image::from_fn(w, self.height, |x, y| self.pixel(w - 1 - x, y)).expect("same dims")
    }

    /// Copies the window `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop window {x0},{y0} {w}x{h} outside {}x{}",
                self.width, self.height
            )));
        }
        Image::from_fn(w, h, |x, y| self.pixel(x0 + x, y0 + y))
    }

    /// Bilinear resampling with pixel-centre alignment and edge clamping.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Image {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width as usize * height as usize * CHANNELS);
        resample_bilinear(
            &self.data,
            self.width as usize,
            self.height as usize,
            CHANNELS,
            width as usize,
            height as usize,
            &mut data,
        );
        Image::new(width, height, data).expect("bilinear output stays in range")
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn resample_bilinear(
    src: &[f64],
    sw: usize,
    sh: usize,
    ch: usize,
    dw: usize,
    dh: usize,
    out: &mut Vec<f64>,
) {
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            for c in 0..ch {
                let p = |xx: usize, yy: usize| src[(yy * sw + xx) * ch + c];
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                out.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
            }
        }
    }
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

/// Inclusive-exclusive pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

impl ForegroundMask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidImage(format!(
                "mask length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// Mask set inside the rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    /// Binarizes grey levels in `[0, 1]` at 0.5.
    pub fn from_levels(width: u32, height: u32, levels: &[f64]) -> Result<Self> {
        Self::new(width, height, levels.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bbox: Option<BoundingBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let b = bbox.get_or_insert(BoundingBox {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                });
                b.x0 = b.x0.min(x);
                b.y0 = b.y0.min(y);
                b.x1 = b.x1.max(x + 1);
                b.y1 = b.y1.max(y + 1);
            }
        }
        bbox
    }

    /// Bilinear resize followed by re-binarization at 0.5.
    pub fn resize(&self, width: u32, height: u32) -> ForegroundMask {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let levels: Vec<f64> = self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mut out = Vec::with_capacity(width as usize * height as usize);
        resample_bilinear(
            &levels,
            self.width as usize,
            self.height as usize,
            1,
            width as usize,
            height as usize,
            &mut out,
        );
        ForegroundMask::from_levels(width, height, &out).expect("dims match")
    }
}

/// The unit of harmonization work: composite, mask and optional ground truth.
#[derive(Debug, Clone)]
pub struct CompositeSample {
    pub id: String,
    pub composite: Image,
    pub mask: ForegroundMask,
    pub target: Option<Image>,
}

impl CompositeSample {
    pub fn new(
        id: impl Into<String>,
        composite: Image,
        mask: ForegroundMask,
        target: Option<Image>,
    ) -> Result<Self> {
        let id = id.into();
        if composite.dims() != mask.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{id}: composite {:?} vs mask {:?}",
                composite.dims(),
                mask.dims()
            )));
        }
        if let Some(t) = &target {
            if t.dims() != composite.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "{id}: composite {:?} vs target {:?}",
                    composite.dims(),
                    t.dims()
                )));
            }
        }
        if mask.count() == 0 {
            return Err(Error::EmptyForeground(id));
        }
        if let Some(t) = &target {
            let tol = 1.0 / 255.0 + 1e-9;
            let disagree = composite
                .data()
                .chunks_exact(CHANNELS)
                .zip(t.data().chunks_exact(CHANNELS))
                .zip(mask.data())
                .filter(|((a, b), &m)| !m && a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > tol))
                .count();
            if disagree > 0 {
                log::warn!("{id}: {disagree} background pixels differ between composite and target");
            }
        }
        Ok(Self {
            id,
            composite,
            mask,
            target,
        })
    }

    pub fn dims(&self) -> (u32, u32) {
        self.composite.dims()
    }

    /// Resamples every member to `size x size`.
    pub fn resized(&self, size: u32) -> CompositeSample {
        CompositeSample {
            id: self.id.clone(),
            composite: self.composite.resize_bilinear(size, size),
            mask: self.mask.resize(size, size),
            target: self.target.as_ref().map(|t| t.resize_bilinear(size, size)),
        }
    }
}

fn check_exists(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::FileNotFound(path.to_path_buf()))
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    check_exists(path)?;
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) | Some(ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("expected PNG, PPM or JPEG, found {other:?}"),
            })
        }
    }
    reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: u.to_string(),
        },
        other => Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Loads an 8-bit RGB PNG, P6 PPM or JPEG, mapping bytes `v` to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            Image::from_rgb8(w, h, buf.as_raw())
        }
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit RGB, found {:?}", other.color()),
        }),
    }
}

/// Loads an 8-bit grey (or RGB, via the first channel) mask, binarized at 0.5.
pub fn load_mask(path: impl AsRef<Path>) -> Result<ForegroundMask> {
    let path = path.as_ref();
    let (w, h, levels): (u32, u32, Vec<f64>) = match decode(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            (w, h, buf.as_raw().iter().map(|&b| b as f64 / 255.0).collect())
        }
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            (
                w,
                h,
                buf.as_raw().chunks_exact(3).map(|p| p[0] as f64 / 255.0).collect(),
            )
        }
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit grey mask, found {:?}", other.color()),
            })
        }
    };
    ForegroundMask::from_levels(w, h, &levels)
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    image::save_buffer_with_format(
        path,
        &img.to_rgb8(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

/// Writes a mask as an 8-bit grey PNG (0 or 255).
pub fn save_mask(mask: &ForegroundMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let bytes: Vec<u8> = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        mask.width(),
        mask.height(),
        image::ExtendedColorType::L8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub composite: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub target: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryItem {
    pub id: String,
    pub image: PathBuf,
}

/// Dataset manifest. Paths are stored as written; [`load_manifest`]
/// resolves relative ones against `root`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub gallery: Vec<GalleryItem>,
}

impl DatasetManifest {
    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Checks id uniqueness within entries and within the gallery.
    pub fn validate_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Schema(format!("duplicate entry id {:?}", e.id)));
            }
        }
        let mut seen = HashSet::new();
        for g in &self.gallery {
            if !seen.insert(g.id.as_str()) {
                return Err(Error::Schema(format!("duplicate gallery id {:?}", g.id)));
            }
        }
        Ok(())
    }

    /// Loads one entry as a sample, optionally resampled to `size x size`.
    pub fn load_sample(&self, entry: &ManifestEntry, size: Option<u32>) -> Result<CompositeSample> {
        let composite = load_image(&entry.composite)?;
        let mask = load_mask(&entry.mask)?;
        let target = entry.target.as_ref().map(load_image).transpose()?;
        let sample = CompositeSample::new(entry.id.clone(), composite, mask, target)?;
        Ok(match size {
            Some(s) if sample.dims() != (s, s) => {
                let resized = sample.resized(s);
                if resized.mask.count() == 0 {
                    return Err(Error::EmptyForeground(entry.id.clone()));
                }
                resized
            }
            _ => sample,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Reads and validates a manifest; `root` is taken relative to the
/// manifest's directory and every path is resolved against it.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    check_exists(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    manifest.validate_ids()?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.root = resolve(base, &manifest.root);
    let root = manifest.root.clone();
    let existing = |p: &mut PathBuf| -> Result<()> {
        *p = resolve(&root, p);
        if p.is_file() {
            Ok(())
        } else {
            Err(Error::MissingFile(p.clone()))
        }
    };
    for e in &mut manifest.entries {
        existing(&mut e.composite)?;
        existing(&mut e.mask)?;
        if let Some(t) = &mut e.target {
            existing(t)?;
        }
    }
    for g in &mut manifest.gallery {
        existing(&mut g.image)?;
    }
    Ok(manifest)
}
