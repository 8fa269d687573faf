#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use harmony_core::features::{BuiltinProvider, PatchGrid, APPEARANCE_DIM};
use harmony_core::imageio::{CompositeSample, ForegroundMask};
use harmony_core::pipeline::{make_fixtures, FixtureSet, FIXTURE_SIZE};
use harmony_core::retrieval::{build_index, GalleryIndex, QueryFeatures, RetrievalConfig};

pub const FIXTURE_SEED: u64 = 7;
pub const PATCH: u32 = 16;
pub const EPS_C_GRID: [f64; 3] = [0.5, 0.7, 0.9];
pub const EPS_A_GRID: [f64; 3] = [0.7, 0.8, 0.9];

/// Fixture corpus generated once per test binary under the cargo target dir.
pub fn fixtures(tag: &str) -> &'static FixtureSet {
    static SET: OnceLock<FixtureSet> = OnceLock::new();
    SET.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("fixtures-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        make_fixtures(&dir, FIXTURE_SEED).expect("fixtures")
    })
}

pub fn main_index(set: &FixtureSet) -> GalleryIndex {
    build_index(&set.main, &BuiltinProvider, PATCH, FIXTURE_SIZE).expect("index")
}

pub fn ablation_index(set: &FixtureSet) -> GalleryIndex {
    build_index(&set.ablation, &BuiltinProvider, PATCH, FIXTURE_SIZE).expect("index")
}

pub fn samples(manifest: &harmony_core::imageio::DatasetManifest) -> Vec<CompositeSample> {
    manifest
        .entries
        .iter()
        .map(|e| manifest.load_sample(e, Some(FIXTURE_SIZE)).expect("sample"))
        .collect()
}

/// Naive foreground partition: covered share of each patch against tau.
pub fn naive_partition(mask: &ForegroundMask, grid: &PatchGrid, tau: f64) -> (Vec<usize>, Vec<usize>) {
    let s = grid.patch_size;
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let mut covered = 0u32;
            for y in r * s..(r + 1) * s {
                for x in c * s..(c + 1) * s {
                    covered += mask.get(x, y) as u32;
                }
            }
            let p = (r * grid.cols + c) as usize;
            if covered as f64 / (s * s) as f64 >= tau {
                fg.push(p);
            } else {
                bg.push(p);
            }
        }
    }
    (fg, bg)
}

fn naive_cos(u: &[f32], v: &[f32]) -> Option<f64> {
    let (mut d, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..u.len() {
        d += u[i] as f64 * v[i] as f64;
    }
    for a in u {
        nu += *a as f64 * *a as f64;
    }
    for b in v {
        nv += *b as f64 * *b as f64;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some((d / (nu * nv)).clamp(-1.0, 1.0))
}

/// All pairwise similarities between one query and one gallery entry.
pub struct PairTable {
    pub id: String,
    /// content cosine for (foreground patch, reference patch)
    pub fg: Vec<f64>,
    /// (content cosine, appearance cosine) for (background patch, reference patch)
    pub bg: Vec<(f64, f64)>,
}

pub struct OracleQuery {
    pub id: String,
    pub tables: Vec<PairTable>,
}

/// Brute-force similarity tables; appearance cosines are only needed where
/// content passes the lowest threshold of the grid.
pub fn oracle_tables(sample: &CompositeSample, index: &GalleryIndex, tau: f64, min_eps_c: f64) -> OracleQuery {
    let q = QueryFeatures::compute(sample, &BuiltinProvider, index.patch_size, tau).expect("query");
    let (fg, bg) = naive_partition(&sample.mask, &q.content.grid, tau);
    let mut tables = Vec::new();
    for e in &index.entries {
        if e.id == sample.id {
            continue;
        }
        let n = e.content.len();
        let mut fg_sims = Vec::with_capacity(fg.len() * n);
        for &i in &fg {
            for j in 0..n {
                fg_sims.push(naive_cos(q.content.vector(i), e.content.vector(j)).unwrap_or(f64::NAN));
            }
        }
        let mut bg_sims = Vec::with_capacity(bg.len() * n);
        for &i in &bg {
            for j in 0..n {
                let c = naive_cos(q.content.vector(i), e.content.vector(j)).unwrap_or(f64::NAN);
                let a = if c >= min_eps_c {
                    let (u, v) = (q.appearance.vector(i), e.appearance.vector(j));
                    assert_eq!(u.len(), APPEARANCE_DIM);
                    naive_cos(u, v).unwrap_or(0.0)
                } else {
                    f64::NAN
                };
                bg_sims.push((c, a));
            }
        }
        tables.push(PairTable {
            id: e.id.clone(),
            fg: fg_sims,
            bg: bg_sims,
        });
    }
    OracleQuery {
        id: sample.id.clone(),
        tables,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub content_set: Vec<String>,
    pub illum_set: Vec<String>,
    /// (id, illumination pair count, content score), ranked and truncated
    pub ranking: Vec<(String, usize, f64)>,
}

pub fn oracle_outcome(q: &OracleQuery, cfg: &RetrievalConfig) -> OracleOutcome {
    let mut content_set = Vec::new();
    let mut illum_set = Vec::new();
    let mut ranked = Vec::new();
    for t in &q.tables {
        let passing: Vec<f64> = t.fg.iter().copied().filter(|s| *s >= cfg.eps_c).collect();
        if passing.len() < cfg.k_min_content {
            continue;
        }
        content_set.push(t.id.clone());
        let score = passing.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let illum = t.bg.iter().filter(|(c, a)| *c >= cfg.eps_c && *a >= cfg.eps_a).count();
        if illum >= cfg.k_min_illum {
            illum_set.push(t.id.clone());
            ranked.push((t.id.clone(), illum, score));
        }
    }
    // insertion sort with the documented key, kept deliberately simple
    let mut ranking: Vec<(String, usize, f64)> = Vec::new();
    for item in ranked {
        let pos = ranking
            .iter()
            .position(|r| item.1 > r.1 || (item.1 == r.1 && (item.2 > r.2 || (item.2 == r.2 && item.0 < r.0))))
            .unwrap_or(ranking.len());
        ranking.insert(pos, item);
    }
    ranking.truncate(cfg.max_results);
    content_set.sort();
    illum_set.sort();
    OracleOutcome {
        content_set,
        illum_set,
        ranking,
    }
}

/// The same three views produced by the engine.
pub fn engine_outcome(sample: &CompositeSample, index: &GalleryIndex, cfg: &RetrievalConfig) -> OracleOutcome {
    use harmony_core::retrieval::{content_filter, illumination_filter, rank};
    let q = QueryFeatures::compute(sample, &BuiltinProvider, index.patch_size, cfg.tau_f).expect("query");
    let cands = content_filter(&q.content, &q.partition.foreground, index, cfg, Some(&sample.id)).expect("content");
    let mut content_set: Vec<String> = cands.iter().map(|c| index.entries[c.entry].id.clone()).collect();
    let mut results = illumination_filter(&q, cands, index, cfg).expect("illum");
    let mut illum_set: Vec<String> = results.iter().map(|r| r.reference_id.clone()).collect();
    rank(&mut results);
    results.truncate(cfg.max_results);
    content_set.sort();
    illum_set.sort();
    OracleOutcome {
        content_set,
        illum_set,
        ranking: results
            .iter()
            .map(|r| (r.reference_id.clone(), r.illum_pair_count(), r.score_content))
            .collect(),
    }
}

pub fn grid_configs() -> Vec<RetrievalConfig> {
    let mut out = Vec::new();
    for eps_c in EPS_C_GRID {
        for eps_a in EPS_A_GRID {
            out.push(RetrievalConfig {
                eps_c,
                eps_a,
                ..RetrievalConfig::default()
            });
        }
    }
    out
}

pub fn is_subset(a: &[String], b: &[String]) -> bool {
    a.iter().all(|x| b.contains(x))
}
