//! Image metrics on the 0-255 scale, the foreground-normalized loss, and
//! the multi-run benchmark evaluation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{below, keyed_rng};
use crate::error::{Error, Result};
use crate::features::ContentProvider;
use crate::harmonize::{harmonize_with, HarmonizeConfig};
use crate::imageio::{load_image, CompositeSample, DatasetManifest, ForegroundMask, Image, CHANNELS, WORKING_SIZE};
use crate::retrieval::{retrieve, GalleryIndex, RetrievalConfig};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Pixel-count guard of the foreground loss.
pub const DEFAULT_EPS_F: f64 = 100.0;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn squared_error_sum(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = 255.0 * x - 255.0 * y;
            d * d
        })
        .sum()
}

/// Mean over pixels and channels of `(255a - 255b)^2`.
pub fn mse_255(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    Ok(squared_error_sum(a, b) / a.data().len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    10.0 * (255.0f64 * 255.0 / mse.max(1e-10)).log10()
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse_255(a, b)?))
}

/// Squared error summed over the whole image, divided by
/// `max(eps_f, foreground pixel count)`.
pub fn foreground_mse_loss(xhat: &Image, x: &Image, mask: &ForegroundMask, eps_f: f64) -> Result<f64> {
    same_dims(xhat, x)?;
    if mask.dims() != x.dims() {
        return Err(Error::ShapeMismatch(format!("mask {:?} vs image {:?}", mask.dims(), x.dims())));
    }
    Ok(squared_error_sum(xhat, x) / eps_f.max(mask.count() as f64))
}

/// Foreground-only MSE on the 0-255 scale (mean over fg pixels and channels).
pub fn foreground_mse(a: &Image, b: &Image, mask: &ForegroundMask) -> Result<f64> {
    same_dims(a, b)?;
    let mut sum = 0.0;
    for (i, &m) in mask.data().iter().enumerate() {
        if m {
            for c in 0..CHANNELS {
                let d = 255.0 * a.data()[i * CHANNELS + c] - 255.0 * b.data()[i * CHANNELS + c];
                sum += d * d;
            }
        }
    }
    Ok(sum / (mask.count().max(1) * CHANNELS) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "config")]
pub enum Backend {
    /// Output is the composite itself.
    Identity,
    Harmonize(HarmonizeConfig),
}

impl Backend {
    pub fn label(&self) -> &'static str {
        match self {
            Backend::Identity => "Composite",
            Backend::Harmonize(cfg) if cfg.use_reference => "Harmonized (retrieval-augmented)",
            Backend::Harmonize(_) => "Harmonized (non-reference)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub backend: Backend,
    pub runs: usize,
    pub seed: u64,
    /// Samples are resampled to this square size before scoring.
    pub eval_size: Option<u32>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            backend: Backend::Identity,
            runs: 5,
            seed: 0,
            eval_size: Some(WORKING_SIZE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub mse: f64,
    pub psnr: f64,
    pub reference_used: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub mse_mean: f64,
    pub psnr_mean: f64,
    pub per_sample: Vec<SampleScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mse_mean: f64,
    pub psnr_mean: f64,
    /// Population standard deviation of the per-run means.
    pub mse_std: f64,
    pub psnr_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse_scope: String,
    pub method: String,
    pub runs: usize,
    pub seed: u64,
    pub samples: usize,
    pub aggregate: Aggregate,
    pub per_run: Vec<RunReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn population_std(values: &[f64]) -> f64 {
    let m = mean(values.iter().copied());
    mean(values.iter().map(|v| (v - m) * (v - m))).sqrt()
}

impl EvalReport {
    pub fn from_runs(method: &str, seed: u64, per_run: Vec<RunReport>) -> Self {
        let mses: Vec<f64> = per_run.iter().map(|r| r.mse_mean).collect();
        let psnrs: Vec<f64> = per_run.iter().map(|r| r.psnr_mean).collect();
        EvalReport {
            mse_scope: "whole-image".into(),
            method: method.into(),
            runs: per_run.len(),
            seed,
            samples: per_run.first().map_or(0, |r| r.per_sample.len()),
            aggregate: Aggregate {
                mse_mean: mean(mses.iter().copied()),
                psnr_mean: mean(psnrs.iter().copied()),
                mse_std: population_std(&mses),
                psnr_std: population_std(&psnrs),
            },
            per_run,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::json("eval report", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::imageio::ensure_parent(path)?;
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Plain-text table in the usual MSE / PSNR layout.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# MSE scope: {}; {} runs, seed {}", self.mse_scope, self.runs, self.seed);
        let _ = writeln!(out, "{:<34} {:>10} {:>10} {:>8}", "Method", "MSE↓", "PSNR↑", "Samples");
        let _ = writeln!(
            out,
            "{:<34} {:>10.2} {:>10.2} {:>8}",
            self.method, self.aggregate.mse_mean, self.aggregate.psnr_mean, self.samples
        );
        if self.runs > 1 {
            let _ = writeln!(
                out,
                "{:<34} {:>10.4} {:>10.4}",
                "  (std over runs)", self.aggregate.mse_std, self.aggregate.psnr_std
            );
        }
        out
    }
}

/// Everything evaluation needs for one sample, fixed across runs.
struct Prepared {
    sample: CompositeSample,
    candidates: Vec<String>,
}

fn prepare(
    dataset: &DatasetManifest,
    index: &GalleryIndex,
    provider: &dyn ContentProvider,
    retrieval_cfg: &RetrievalConfig,
    opts: &EvalOptions,
) -> Result<Vec<Prepared>> {
    let wants_reference = matches!(&opts.backend, Backend::Harmonize(cfg) if cfg.use_reference);
    let one = |entry: &crate::imageio::ManifestEntry| -> Result<Prepared> {
        let sample = dataset.load_sample(entry, opts.eval_size)?;
        if sample.target.is_none() {
            return Err(Error::Schema(format!("sample {} has no target", entry.id)));
        }
        let candidates = if wants_reference && !index.is_empty() {
            retrieve(&sample, index, provider, retrieval_cfg)?
                .into_iter()
                .map(|r| r.reference_id)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Prepared { sample, candidates })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        dataset.entries.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        dataset.entries.iter().map(one).collect()
    }
}

/// Reference for `(seed, run, sample)`, uniform over the retrieved ids.
pub fn pick_reference<'a>(seed: u64, run: usize, sample_id: &str, candidates: &'a [String]) -> Option<&'a str> {
    if candidates.is_empty() {
        return None;
    }
    let mut rng = keyed_rng(seed, sample_id, run as u64);
    Some(&candidates[below(&mut rng, candidates.len() as u64) as usize])
}

fn score_one(
    prep: &Prepared,
    index: &GalleryIndex,
    provider: &dyn ContentProvider,
    opts: &EvalOptions,
    run: usize,
) -> Result<SampleScore> {
    let sample = &prep.sample;
    let target = sample.target.as_ref().expect("checked in prepare");
    let (output, reference_used) = match &opts.backend {
        Backend::Identity => (sample.composite.clone(), None),
        Backend::Harmonize(cfg) => {
            let pick = pick_reference(opts.seed, run, &sample.id, &prep.candidates);
            let reference = match pick {
                Some(id) => {
                    let entry = index
                        .get(id)
                        .ok_or_else(|| Error::Schema(format!("retrieved id {id} missing from index")))?;
                    Some((id, load_image(&entry.image_path)?))
                }
                None => None,
            };
            let out = harmonize_with(sample, reference.as_ref().map(|(id, img)| (*id, img)), cfg, provider)?;
            (out.image, pick.map(str::to_string))
        }
    };
    let mse = mse_255(&output, target)?;
    Ok(SampleScore {
        id: sample.id.clone(),
        mse,
        psnr: psnr_from_mse(mse),
        reference_used,
    })
}

/// Scores every sample in `dataset` over `opts.runs` runs.
pub fn evaluate(
    dataset: &DatasetManifest,
    index: &GalleryIndex,
    provider: &dyn ContentProvider,
    retrieval_cfg: &RetrievalConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    let prepared = prepare(dataset, index, provider, retrieval_cfg, opts)?;
    let mut per_run = Vec::with_capacity(opts.runs);
    for run in 0..opts.runs {
        #[cfg(feature = "parallel")]
        let scores: Result<Vec<SampleScore>> = {
            use rayon::prelude::*;
            prepared.par_iter().map(|p| score_one(p, index, provider, opts, run)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let scores: Result<Vec<SampleScore>> =
            prepared.iter().map(|p| score_one(p, index, provider, opts, run)).collect();
        let per_sample = scores?;
        per_run.push(RunReport {
            run,
            mse_mean: mean(per_sample.iter().map(|s| s.mse)),
            psnr_mean: mean(per_sample.iter().map(|s| s.psnr)),
            per_sample,
        });
    }
    Ok(EvalReport::from_runs(opts.backend.label(), opts.seed, per_run))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_monotone() {
        let a = Image::filled(4, 4, [0.2; 3]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr_from_mse(1.0) > psnr_from_mse(2.0));
    }

    #[test]
    fn shape_mismatch() {
        let a = Image::filled(4, 4, [0.2; 3]).unwrap();
        let b = Image::filled(4, 5, [0.2; 3]).unwrap();
        assert!(matches!(mse_255(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn population_std_of_constant_is_zero() {
        assert_eq!(population_std(&[3.5, 3.5, 3.5]), 0.0);
        assert!((population_std(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}
