//! Two-stage reference retrieval over a persistent gallery index.
//!
//! Stage one keeps gallery images sharing content with the query
//! foreground; stage two keeps those whose patches match the query
//! background in both content and HSV appearance on the same patch pair.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{
    self, compute_appearance, AppearanceFeatureMap, ContentFeatureMap, ContentProvider, PatchGrid, APPEARANCE_DIM,
};
use crate::imageio::{self, CompositeSample, DatasetManifest, ForegroundMask};
use crate::raif::RaifBlob;

pub const INDEX_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub eps_c: f64,
    pub eps_a: f64,
    pub tau_f: f64,
    pub k_min_content: usize,
    pub k_min_illum: usize,
    pub max_results: usize,
    /// Skip entries whose centroid bound rules out any content match.
    pub prefilter: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            eps_c: 0.7,
            eps_a: 0.9,
            tau_f: 0.5,
            k_min_content: 1,
            k_min_illum: 1,
            max_results: 10,
            prefilter: false,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1]")))
            }
        };
        unit("eps_c", self.eps_c)?;
        unit("eps_a", self.eps_a)?;
        unit("tau_f", self.tau_f)?;
        if self.k_min_content == 0 || self.k_min_illum == 0 || self.max_results == 0 {
            return Err(Error::Config("k_min_content, k_min_illum and max_results must be positive".into()));
        }
        Ok(())
    }
}

/// Foreground and background patch ids of a mask on a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPartition {
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
}

/// A patch is foreground when its covered fraction reaches `tau_f`.
pub fn foreground_patches(mask: &ForegroundMask, grid: &PatchGrid, tau_f: f64) -> Result<PatchPartition> {
    if mask.dims() != (grid.image_width, grid.image_height) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs grid image {}x{}",
            mask.dims(),
            grid.image_width,
            grid.image_height
        )));
    }
    let area = grid.area() as f64;
    let (mut foreground, mut background) = (Vec::new(), Vec::new());
    for p in 0..grid.len() {
        let covered = grid.pixels(p).filter(|&(x, y)| mask.get(x, y)).count();
        if covered as f64 / area >= tau_f {
            foreground.push(p);
        } else {
            background.push(p);
        }
    }
    if foreground.is_empty() {
        return Err(Error::EmptyForeground(String::new()));
    }
    Ok(PatchPartition {
        foreground,
        background,
    })
}

/// Gallery image with both feature maps and scan-ready copies of them.
#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub content: ContentFeatureMap,
    pub appearance: AppearanceFeatureMap,
    scan: ScanData,
}

#[derive(Debug, Clone)]
struct ScanData {
    // content transposed to dim-major so one query vector scores all patches at once
    content_t: Vec<f64>,
    content_norms: Vec<f64>,
    appearance_dense: Vec<f64>,
    appearance_norms: Vec<f64>,
    centroid: Vec<f64>,
    radius: f64,
    min_norm: f64,
}

impl IndexEntry {
    pub fn new(
        id: impl Into<String>,
        image_path: impl Into<PathBuf>,
        content: ContentFeatureMap,
        appearance: AppearanceFeatureMap,
    ) -> Result<Self> {
        if content.grid.shape() != appearance.grid.shape() {
            return Err(Error::ShapeMismatch(format!(
                "content grid {:?} vs appearance grid {:?}",
                content.grid.shape(),
                appearance.grid.shape()
            )));
        }
        let scan = ScanData::new(&content, &appearance);
        Ok(Self {
            id: id.into(),
            image_path: image_path.into(),
            content,
            appearance,
            scan,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.content.len()
    }
}

impl ScanData {
    fn new(content: &ContentFeatureMap, appearance: &AppearanceFeatureMap) -> Self {
        let n = content.len();
        let d = content.dim;
        let mut content_t = vec![0.0; n * d];
        for j in 0..n {
            for (k, &v) in content.vector(j).iter().enumerate() {
                content_t[k * n + j] = v as f64;
            }
        }
        let content_norms: Vec<f64> = (0..n).map(|j| features::l2_norm(content.vector(j))).collect();
        let appearance_dense = appearance.vectors.iter().map(|&v| v as f64).collect();
        let appearance_norms = (0..n).map(|j| features::l2_norm(appearance.vector(j))).collect();
        let (centroid, radius) = centroid_radius((0..n).map(|j| content.vector(j)), d);
        let min_norm = content_norms.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            content_t,
            content_norms,
            appearance_dense,
            appearance_norms,
            centroid,
            radius,
            min_norm,
        }
    }
}

fn centroid_radius<'a>(vectors: impl Iterator<Item = &'a [f32]> + Clone, dim: usize) -> (Vec<f64>, f64) {
    let mut centroid = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors.clone() {
        n += 1;
        for (c, &x) in centroid.iter_mut().zip(v) {
            *c += x as f64;
        }
    }
    if n > 0 {
        centroid.iter_mut().for_each(|c| *c /= n as f64);
    }
    let radius = vectors
        .map(|v| v.iter().zip(&centroid).map(|(&x, c)| (x as f64 - c).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    (centroid, radius)
}

/// Persisted collection of gallery feature maps sharing one content provider.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    pub provider_tag: String,
    pub patch_size: u32,
    pub working_size: u32,
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    provider: String,
    patch_size: u32,
    dim: usize,
    #[serde(default = "default_working_size")]
    working_size: u32,
    entries: Vec<IndexFileEntry>,
}

fn default_working_size() -> u32 {
    imageio::WORKING_SIZE
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFileEntry {
    id: String,
    image: String,
    content: String,
    appearance: String,
}

impl GalleryIndex {
    pub fn empty(provider_tag: impl Into<String>, patch_size: u32, working_size: u32, dim: usize) -> Self {
        Self {
            provider_tag: provider_tag.into(),
            patch_size,
            working_size,
            dim,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Adds an entry, enforcing unique ids and a uniform provider, dim and grid.
    pub fn push(&mut self, entry: IndexEntry) -> Result<()> {
        if entry.content.provider_tag != self.provider_tag {
            return Err(Error::ProviderMismatch {
                index: self.provider_tag.clone(),
                query: entry.content.provider_tag.clone(),
            });
        }
        if entry.content.dim != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: entry.content.dim,
            });
        }
        if let Some(first) = self.entries.first() {
            if first.content.grid.shape() != entry.content.grid.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "entry {} grid {:?} differs from index grid {:?}",
                    entry.id,
                    entry.content.grid.shape(),
                    first.content.grid.shape()
                )));
            }
        }
        if self.get(&entry.id).is_some() {
            return Err(Error::Schema(format!("duplicate gallery id {:?}", entry.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Digest over provider, grid and every feature byte, in entry order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.provider_tag.as_bytes());
        h.update(self.patch_size.to_le_bytes());
        h.update(self.working_size.to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for e in &self.entries {
            h.update(e.id.as_bytes());
            h.update([0]);
            h.update(e.content.to_raif().to_bytes());
            h.update(e.appearance.to_raif().to_bytes());
        }
        hex(&h.finalize())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let content = format!("content/{i:05}.raif");
            let appearance = format!("appearance/{i:05}.raif");
            e.content.to_raif().write(dir.join(&content))?;
            e.appearance.to_raif().write(dir.join(&appearance))?;
            files.push(IndexFileEntry {
                id: e.id.clone(),
                image: e.image_path.to_string_lossy().into_owned(),
                content,
                appearance,
            });
        }
        let file = IndexFile {
            version: INDEX_VERSION,
            provider: self.provider_tag.clone(),
            patch_size: self.patch_size,
            dim: self.dim,
            working_size: self.working_size,
            entries: files,
        };
        let path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("index", e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX_FILE);
        if !path.is_file() {
            return Err(Error::FileNotFound(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: IndexFile =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if file.version != INDEX_VERSION {
            return Err(Error::VersionMismatch(file.version as u16));
        }
        let grid = PatchGrid::new(file.working_size, file.working_size, file.patch_size)?;
        let mut index = GalleryIndex::empty(file.provider, file.patch_size, file.working_size, file.dim);
        for fe in file.entries {
            let blob = RaifBlob::read(dir.join(&fe.content))?;
            if blob.dim as usize != file.dim {
                return Err(Error::DimMismatch {
                    expected: file.dim,
                    found: blob.dim as usize,
                });
            }
            let content = ContentFeatureMap {
                grid,
                dim: file.dim,
                vectors: blob.data,
                provider_tag: index.provider_tag.clone(),
            };
            if (content.len() as u32) != grid.rows * grid.cols {
                return Err(Error::ShapeMismatch(format!("entry {} content grid", fe.id)));
            }
            let appearance = AppearanceFeatureMap::from_raif(RaifBlob::read(dir.join(&fe.appearance))?, grid)?;
            index.push(IndexEntry::new(fe.id, fe.image, content, appearance)?)?;
        }
        Ok(index)
    }

    /// Loads `dir`, rebuilding from `manifest` when it is missing, of another
    /// version, or built with a different provider or patch size.
    pub fn open_or_build(
        dir: impl AsRef<Path>,
        manifest: &DatasetManifest,
        provider: &dyn ContentProvider,
        patch_size: u32,
        working_size: u32,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        match Self::load(dir) {
            Ok(index)
                if index.provider_tag == provider.tag()
                    && index.patch_size == patch_size
                    && index.working_size == working_size =>
            {
                return Ok(index)
            }
            Ok(_) | Err(Error::VersionMismatch(_)) | Err(Error::FileNotFound(_)) => {}
            Err(e) => return Err(e),
        }
        let index = build_index(manifest, provider, patch_size, working_size)?;
        index.save(dir)?;
        Ok(index)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Features for one gallery image at the working resolution.
pub fn index_entry_for(
    id: &str,
    image_path: &Path,
    provider: &dyn ContentProvider,
    patch_size: u32,
    working_size: u32,
) -> Result<IndexEntry> {
    let img = imageio::load_image(image_path)?.resize_bilinear(working_size, working_size);
    let content = provider.content(id, &img, patch_size)?;
    let appearance = compute_appearance(&img, &PatchGrid::for_image(&img, patch_size)?)?;
    IndexEntry::new(id, image_path, content, appearance)
}

/// Builds an index over the manifest's gallery list.
pub fn build_index(
    manifest: &DatasetManifest,
    provider: &dyn ContentProvider,
    patch_size: u32,
    working_size: u32,
) -> Result<GalleryIndex> {
    let items: Vec<(&str, &Path)> = manifest.gallery.iter().map(|g| (g.id.as_str(), g.image.as_path())).collect();
    build_index_from(&items, provider, patch_size, working_size)
}

/// Builds an index over arbitrary `(id, image path)` pairs.
pub fn build_index_from(
    items: &[(&str, &Path)],
    provider: &dyn ContentProvider,
    patch_size: u32,
    working_size: u32,
) -> Result<GalleryIndex> {
    let make = |(id, path): &(&str, &Path)| index_entry_for(id, path, provider, patch_size, working_size);
    #[cfg(feature = "parallel")]
    let entries: Vec<Result<IndexEntry>> = {
        use rayon::prelude::*;
        items.par_iter().map(make).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let entries: Vec<Result<IndexEntry>> = items.iter().map(make).collect();

    let dim = entries
        .iter()
        .find_map(|e| e.as_ref().ok().map(|e| e.content.dim))
        .unwrap_or(features::BUILTIN_DIM);
    let mut index = GalleryIndex::empty(provider.tag(), patch_size, working_size, dim);
    for e in entries {
        index.push(e?)?;
    }
    Ok(index)
}

/// Query-side features: content, appearance and the patch partition.
#[derive(Debug, Clone)]
pub struct QueryFeatures {
    pub content: ContentFeatureMap,
    pub appearance: AppearanceFeatureMap,
    pub partition: PatchPartition,
}

impl QueryFeatures {
    /// Computes features for `sample`, which must already be at the index's
    /// working resolution.
    pub fn compute(
        sample: &CompositeSample,
        provider: &dyn ContentProvider,
        patch_size: u32,
        tau_f: f64,
    ) -> Result<Self> {
        let grid = PatchGrid::for_image(&sample.composite, patch_size)?;
        let content = provider.content(&sample.id, &sample.composite, patch_size)?;
        if content.grid.shape() != grid.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: content grid {:?} vs appearance grid {:?}",
                sample.id,
                content.grid.shape(),
                grid.shape()
            )));
        }
        let appearance = compute_appearance(&sample.composite, &grid)?;
        let partition = foreground_patches(&sample.mask, &grid, tau_f).map_err(|e| match e {
            Error::EmptyForeground(_) => Error::EmptyForeground(sample.id.clone()),
            other => other,
        })?;
        Ok(Self {
            content,
            appearance,
            partition,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentMatch {
    pub query_patch: u16,
    pub ref_patch: u16,
    pub sim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IllumMatch {
    pub query_patch: u16,
    pub ref_patch: u16,
    pub sim_content: f64,
    pub sim_appearance: f64,
}

/// Stage-one survivor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCandidate {
    pub entry: usize,
    pub score_content: f64,
    pub matches: Vec<ContentMatch>,
}

/// A ranked reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub reference_id: String,
    /// Highest content similarity among matched foreground pairs.
    pub score_content: f64,
    /// Highest appearance similarity among matched background pairs.
    pub score_illum: f64,
    pub matched_pairs_content: Vec<ContentMatch>,
    pub matched_pairs_illum: Vec<IllumMatch>,
}

impl RetrievalResult {
    pub fn illum_pair_count(&self) -> usize {
        self.matched_pairs_illum.len()
    }
}

fn check_query(query: &ContentFeatureMap, index: &GalleryIndex) -> Result<()> {
    if query.provider_tag != index.provider_tag {
        return Err(Error::ProviderMismatch {
            index: index.provider_tag.clone(),
            query: query.provider_tag.clone(),
        });
    }
    if query.dim != index.dim {
        return Err(Error::DimMismatch {
            expected: index.dim,
            found: query.dim,
        });
    }
    Ok(())
}

/// Cosines of one query vector against every patch of an entry, written
/// into `out`. Each dot accumulates in index order, matching [`features::cosine`].
fn score_row(q: &[f32], q_norm: f64, scan: &ScanData, out: &mut [f64]) {
    let n = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (k, &qk) in q.iter().enumerate() {
        let qk = qk as f64;
        let col = &scan.content_t[k * n..(k + 1) * n];
        for (acc, &r) in out.iter_mut().zip(col) {
            *acc += qk * r;
        }
    }
    for (v, &rn) in out.iter_mut().zip(&scan.content_norms) {
        *v = features::cosine_from_parts(*v, q_norm, rn);
    }
}

struct QueryRows {
    nonzero: Vec<Vec<usize>>,
}

impl QueryRows {
    fn new(app: &AppearanceFeatureMap, patches: &[usize]) -> Self {
        let nonzero = patches
            .iter()
            .map(|&p| app.vector(p).iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, _)| k).collect())
            .collect();
        Self { nonzero }
    }
}

fn prefilter_rejects(query: &ContentFeatureMap, patches: &[usize], scan: &ScanData, eps_c: f64) -> bool {
    if patches.is_empty() || scan.content_norms.is_empty() {
        return true;
    }
    let (centroid, radius) = centroid_radius(patches.iter().map(|&p| query.vector(p)), query.dim);
    let q_min_norm = patches.iter().map(|&p| features::l2_norm(query.vector(p))).fold(f64::INFINITY, f64::min);
    let dot: f64 = centroid.iter().zip(&scan.centroid).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let bound = dot + radius * norm(&scan.centroid) + scan.radius * norm(&centroid) + radius * scan.radius;
    let denom = q_min_norm * scan.min_norm;
    // any pair's cosine is at most bound / denom (plus rounding slack)
    denom > 0.0 && bound >= 0.0 && bound / denom + 1e-9 < eps_c
}

/// Stage one: entries with at least `k_min_content` foreground/reference
/// patch pairs at cosine `>= eps_c`. Entries whose id is in `exclude` are skipped.
pub fn content_filter(
    query: &ContentFeatureMap,
    foreground: &[usize],
    index: &GalleryIndex,
    cfg: &RetrievalConfig,
    exclude: Option<&str>,
) -> Result<Vec<ContentCandidate>> {
    check_query(query, index)?;
    let q_norms: Vec<f64> = foreground.iter().map(|&p| features::l2_norm(query.vector(p))).collect();
    let scan_entry = |(ei, entry): (usize, &IndexEntry)| -> Option<ContentCandidate> {
        if exclude == Some(entry.id.as_str()) {
            return None;
        }
        if cfg.prefilter && prefilter_rejects(query, foreground, &entry.scan, cfg.eps_c) {
            return None;
        }
        let mut row = vec![0.0; entry.patch_count()];
        let mut matches = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for (qi, &p) in foreground.iter().enumerate() {
            score_row(query.vector(p), q_norms[qi], &entry.scan, &mut row);
            for (j, &sim) in row.iter().enumerate() {
                if sim >= cfg.eps_c {
                    best = best.max(sim);
                    matches.push(ContentMatch {
                        query_patch: p as u16,
                        ref_patch: j as u16,
                        sim,
                    });
                }
            }
        }
        (matches.len() >= cfg.k_min_content).then_some(ContentCandidate {
            entry: ei,
            score_content: best,
            matches,
        })
    };
    Ok(map_entries(index, scan_entry))
}

#[cfg(feature = "parallel")]
fn map_entries<T: Send>(index: &GalleryIndex, f: impl Fn((usize, &IndexEntry)) -> Option<T> + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    index.entries.par_iter().enumerate().filter_map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_entries<T>(index: &GalleryIndex, f: impl Fn((usize, &IndexEntry)) -> Option<T>) -> Vec<T> {
    index.entries.iter().enumerate().filter_map(f).collect()
}

/// Stage two: candidates with at least `k_min_illum` background/reference
/// pairs meeting both `eps_c` (content) and `eps_a` (appearance).
pub fn illumination_filter(
    query: &QueryFeatures,
    candidates: Vec<ContentCandidate>,
    index: &GalleryIndex,
    cfg: &RetrievalConfig,
) -> Result<Vec<RetrievalResult>> {
    check_query(&query.content, index)?;
    let background = &query.partition.background;
    let q_norms: Vec<f64> = background.iter().map(|&p| features::l2_norm(query.content.vector(p))).collect();
    let a_norms: Vec<f64> = background.iter().map(|&p| features::l2_norm(query.appearance.vector(p))).collect();
    let rows = QueryRows::new(&query.appearance, background);

    let scan_candidate = |cand: ContentCandidate| -> Option<RetrievalResult> {
        let entry = &index.entries[cand.entry];
        let scan = &entry.scan;
        let mut row = vec![0.0; entry.patch_count()];
        let mut matches = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for (bi, &p) in background.iter().enumerate() {
            score_row(query.content.vector(p), q_norms[bi], scan, &mut row);
            let qa = query.appearance.vector(p);
            for (j, &sim_c) in row.iter().enumerate() {
                if sim_c < cfg.eps_c {
                    continue;
                }
                let ra = &scan.appearance_dense[j * APPEARANCE_DIM..(j + 1) * APPEARANCE_DIM];
                let mut acc = 0.0f64;
                for &k in &rows.nonzero[bi] {
                    acc += qa[k] as f64 * ra[k];
                }
                let (na, nr) = (a_norms[bi], scan.appearance_norms[j]);
                let sim_a = if na == 0.0 || nr == 0.0 {
                    0.0
                } else {
                    features::cosine_from_parts(acc, na, nr)
                };
                if sim_a >= cfg.eps_a {
                    best = best.max(sim_a);
                    matches.push(IllumMatch {
                        query_patch: p as u16,
                        ref_patch: j as u16,
                        sim_content: sim_c,
                        sim_appearance: sim_a,
                    });
                }
            }
        }
        (matches.len() >= cfg.k_min_illum).then(|| RetrievalResult {
            reference_id: entry.id.clone(),
            score_content: cand.score_content,
            score_illum: best,
            matched_pairs_content: cand.matches,
            matched_pairs_illum: matches,
        })
    };

    #[cfg(feature = "parallel")]
    let results = {
        use rayon::prelude::*;
        candidates.into_par_iter().filter_map(scan_candidate).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results = candidates.into_iter().filter_map(scan_candidate).collect();
    Ok(results)
}

/// Ranking key: illumination pair count desc, content score desc, id asc.
pub fn rank(results: &mut [RetrievalResult]) {
    results.sort_by(|a, b| {
        b.illum_pair_count()
            .cmp(&a.illum_pair_count())
            .then_with(|| b.score_content.total_cmp(&a.score_content))
            .then_with(|| a.reference_id.cmp(&b.reference_id))
    });
}

/// Full retrieval for a sample; the sample is resampled to the index's
/// working resolution when needed and its own id is never returned.
pub fn retrieve(
    sample: &CompositeSample,
    index: &GalleryIndex,
    provider: &dyn ContentProvider,
    cfg: &RetrievalConfig,
) -> Result<Vec<RetrievalResult>> {
    cfg.validate()?;
    if index.is_empty() {
        return Ok(Vec::new());
    }
    if provider.tag() != index.provider_tag {
        return Err(Error::ProviderMismatch {
            index: index.provider_tag.clone(),
            query: provider.tag().to_string(),
        });
    }
    let resized;
    let sample = if sample.dims() != (index.working_size, index.working_size) {
        resized = sample.resized(index.working_size);
        &resized
    } else {
        sample
    };
    let query = QueryFeatures::compute(sample, provider, index.patch_size, cfg.tau_f)?;
    retrieve_with_features(&sample.id, &query, index, cfg)
}

/// Retrieval from precomputed query features.
pub fn retrieve_with_features(
    sample_id: &str,
    query: &QueryFeatures,
    index: &GalleryIndex,
    cfg: &RetrievalConfig,
) -> Result<Vec<RetrievalResult>> {
    let candidates = content_filter(&query.content, &query.partition.foreground, index, cfg, Some(sample_id))?;
    let mut results = illumination_filter(query, candidates, index, cfg)?;
    rank(&mut results);
    results.truncate(cfg.max_results);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{BuiltinProvider, BUILTIN_TAG};
    use crate::imageio::Image;

    fn unit_map(vectors: &[[f32; 2]], rows: u32, cols: u32) -> ContentFeatureMap {
        ContentFeatureMap {
            grid: PatchGrid::new(cols * 2, rows * 2, 2).unwrap(),
            dim: 2,
            vectors: vectors.iter().flatten().copied().collect(),
            provider_tag: "test".into(),
        }
    }

    fn flat_appearance(n: u32) -> AppearanceFeatureMap {
        let mut vectors = vec![0.0; n as usize * APPEARANCE_DIM];
        for p in 0..n as usize {
            vectors[p * APPEARANCE_DIM] = 1.0;
        }
        AppearanceFeatureMap {
            grid: PatchGrid::new(n * 2, 2, 2).unwrap(),
            vectors,
        }
    }

    #[test]
    fn full_mask_selects_every_patch() {
        let grid = PatchGrid::new(256, 256, 16).unwrap();
        let mask = ForegroundMask::from_fn(256, 256, |_, _| true);
        let part = foreground_patches(&mask, &grid, 0.5).unwrap();
        assert_eq!(part.foreground.len(), 256);
        assert!(part.background.is_empty());
    }

    #[test]
    fn single_patch_mask() {
        let grid = PatchGrid::new(64, 64, 16).unwrap();
        let mask = ForegroundMask::rect(64, 64, 16, 32, 32, 48);
        let part = foreground_patches(&mask, &grid, 0.5).unwrap();
        assert_eq!(part.foreground, vec![2 * 4 + 1]);
        assert_eq!(part.background.len(), 15);
    }

    #[test]
    fn partial_coverage_below_threshold_is_background() {
        let grid = PatchGrid::new(20, 10, 10).unwrap();
        // 40 of 100 pixels in patch 0, all of patch 1
        let mask = ForegroundMask::from_fn(20, 10, |x, y| (x < 10 && y < 4) || x >= 10);
        let part = foreground_patches(&mask, &grid, 0.5).unwrap();
        assert_eq!(part.foreground, vec![1]);
        assert_eq!(part.background, vec![0]);
        let none = ForegroundMask::from_fn(20, 10, |x, y| x < 10 && y < 4);
        assert!(matches!(foreground_patches(&none, &grid, 0.5), Err(Error::EmptyForeground(_))));
    }

    #[test]
    fn orthogonal_query_yields_empty_candidates() {
        let mut index = GalleryIndex::empty("test", 2, 4, 2);
        let content = unit_map(&[[1.0, 0.0], [1.0, 0.0]], 1, 2);
        index.push(IndexEntry::new("g", "g.png", content, flat_appearance(2)).unwrap()).unwrap();
        let query = unit_map(&[[0.0, 1.0], [0.0, 1.0]], 1, 2);
        let out = content_filter(&query, &[0, 1], &index, &RetrievalConfig::default(), None).unwrap();
        assert!(out.is_empty());
        let same = unit_map(&[[1.0, 0.0], [0.0, 1.0]], 1, 2);
        let out = content_filter(&same, &[0, 1], &index, &RetrievalConfig::default(), None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].matches.len(), 2);
        assert_eq!(out[0].score_content, 1.0);
    }

    #[test]
    fn provider_mismatch_rejected() {
        let index = GalleryIndex::empty("other", 2, 4, 2);
        let query = unit_map(&[[1.0, 0.0]], 1, 1);
        assert!(matches!(
            content_filter(&query, &[0], &index, &RetrievalConfig::default(), None),
            Err(Error::ProviderMismatch { .. })
        ));
    }

    #[test]
    fn empty_index_returns_nothing() {
        let index = GalleryIndex::empty(BUILTIN_TAG, 16, 32, 48);
        let img = Image::filled(32, 32, [0.3, 0.4, 0.5]).unwrap();
        let sample = CompositeSample::new("s", img, ForegroundMask::rect(32, 32, 0, 0, 16, 16), None).unwrap();
        let out = retrieve(&sample, &index, &BuiltinProvider, &RetrievalConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let bad = RetrievalConfig {
            eps_c: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig {
            k_min_illum: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ranking_tie_breaks_by_id() {
        let mk = |id: &str, n: usize, s: f64| RetrievalResult {
            reference_id: id.into(),
            score_content: s,
            score_illum: 1.0,
            matched_pairs_content: vec![],
            matched_pairs_illum: vec![
                IllumMatch {
                    query_patch: 0,
                    ref_patch: 0,
                    sim_content: 1.0,
                    sim_appearance: 1.0
                };
                n
            ],
        };
        let mut v = vec![mk("c", 1, 0.9), mk("b", 2, 0.8), mk("a", 1, 0.9), mk("d", 1, 0.95)];
        rank(&mut v);
        let ids: Vec<_> = v.iter().map(|r| r.reference_id.as_str()).collect();
        assert_eq!(ids, ["b", "d", "a", "c"]);
    }
}
