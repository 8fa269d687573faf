use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use harmony_core::augment::{augment_reference, build_training_manifest, CropWindow};
use harmony_core::config::ToolConfig;
use harmony_core::features::{BuiltinProvider, ContentProvider, FileProvider, DEFAULT_PATCH_SIZE};
use harmony_core::harmonize::harmonize_with;
use harmony_core::imageio::{load_image, load_manifest, load_mask, save_image, CompositeSample, WORKING_SIZE};
use harmony_core::metrics::{self, evaluate, Backend, EvalOptions};
use harmony_core::pipeline::{build_benchmark, make_fixtures, BenchmarkSpec, GalleryPolicy};
use harmony_core::retrieval::{build_index, retrieve, GalleryIndex, RetrievalResult};
use harmony_core::sgf::check;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

#[derive(Parser)]
#[command(name = "harmony", version, about = "Retrieval-augmented image harmonization toolkit")]
struct Cli {
    /// JSON file with optional `retrieval`, `augment`, `mix` and `harmonize` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice; required by commands that draw randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FeatureArgs {
    /// Directory of exported `<id>.raif` content features; built-in descriptor when absent.
    #[arg(long)]
    features: Option<PathBuf>,
}

impl FeatureArgs {
    fn provider(&self) -> Box<dyn ContentProvider> {
        match &self.features {
            Some(dir) => Box::new(FileProvider::new(dir)),
            None => Box::new(BuiltinProvider),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract and persist gallery features.
    IndexGallery {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
        patch_size: u32,
        #[arg(long, default_value_t = WORKING_SIZE)]
        working_size: u32,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Retrieve references for manifest samples.
    Retrieve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Restrict to these sample ids (repeatable).
        #[arg(long)]
        sample: Vec<String>,
        /// Include every matched patch pair in the output.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Harmonize one composite.
    Harmonize {
        #[arg(long)]
        composite: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        no_reference: bool,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth; prints MSE and PSNR of the result when given.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Write augmented references and, with an index, a training manifest.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        draws: u64,
        #[arg(long)]
        index: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Keep only samples with a retrievable reference among other targets.
    BuildBenchmark {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
        patch_size: u32,
        #[arg(long, default_value_t = WORKING_SIZE)]
        working_size: u32,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Score a dataset over several runs of random reference choice.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Gallery index; without one every sample runs without a reference.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        non_reference: bool,
        /// Score the composites themselves.
        #[arg(long)]
        identity: bool,
        /// Square evaluation size; 0 keeps native resolution.
        #[arg(long, default_value_t = WORKING_SIZE)]
        eval_size: u32,
        /// Report JSON path; the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Run the attention invariant suite.
    SgfCheck {
        #[arg(long, default_value_t = 200)]
        draws: usize,
        /// Write the golden-input attention bundle here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Generate the synthetic test corpus.
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Invariant(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<harmony_core::Error> for Failure {
    fn from(e: harmony_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn require_seed(seed: Option<u64>, command: &str) -> Result<u64, Failure> {
    seed.ok_or_else(|| Failure::Usage(format!("{command} draws random numbers and needs --seed")))
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct Brief<'a> {
    reference_id: &'a str,
    score_content: f64,
    score_illum: f64,
    content_pairs: usize,
    illum_pairs: usize,
}

#[derive(Serialize)]
#[serde(untagged)]
enum ResultView<'a> {
    Brief(Vec<Brief<'a>>),
    Full(&'a [RetrievalResult]),
}

#[derive(Serialize)]
struct SampleRetrieval<'a> {
    sample: &'a str,
    results: ResultView<'a>,
}

#[derive(Serialize)]
struct AugmentRecord {
    sample: String,
    draw: u64,
    file: String,
    window: CropWindow,
    flipped: bool,
}

fn run(cli: Cli) -> CmdResult {
    let cfg = match &cli.config {
        Some(path) => ToolConfig::load(path)?,
        None => ToolConfig::default(),
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::IndexGallery {
            manifest,
            out,
            patch_size,
            working_size,
            features,
        } => {
            let manifest = load_manifest(&manifest)?;
            let index = build_index(&manifest, features.provider().as_ref(), patch_size, working_size)?;
            index.save(&out)?;
            println!("indexed {} images into {} (checksum {})", index.len(), out.display(), index.checksum());
        }
        Command::Retrieve {
            manifest,
            index,
            sample,
            full,
            out,
            features,
        } => {
            let manifest = load_manifest(&manifest)?;
            let index = GalleryIndex::load(&index)?;
            let provider = features.provider();
            let entries: Vec<_> = if sample.is_empty() {
                manifest.entries.iter().collect()
            } else {
                sample
                    .iter()
                    .map(|id| manifest.entry(id).ok_or_else(|| anyhow!("no sample {id:?} in manifest")))
                    .collect::<anyhow::Result<_>>()?
            };
            let mut all = Vec::new();
            for entry in entries {
                let s = manifest.load_sample(entry, Some(index.working_size))?;
                all.push((entry.id.clone(), retrieve(&s, &index, provider.as_ref(), &cfg.retrieval)?));
            }
            let view: Vec<SampleRetrieval> = all
                .iter()
                .map(|(id, results)| SampleRetrieval {
                    sample: id,
                    results: if full {
                        ResultView::Full(results)
                    } else {
                        ResultView::Brief(
                            results
                                .iter()
                                .map(|r| Brief {
                                    reference_id: &r.reference_id,
                                    score_content: r.score_content,
                                    score_illum: r.score_illum,
                                    content_pairs: r.matched_pairs_content.len(),
                                    illum_pairs: r.matched_pairs_illum.len(),
                                })
                                .collect(),
                        )
                    },
                })
                .collect();
            write_json(&view, out.as_deref())?;
        }
        Command::Harmonize {
            composite,
            mask,
            reference,
            no_reference,
            out,
            target,
            dump_attention,
            features,
        } => {
            let mut hcfg = cfg.harmonize.clone();
            if let Some(seed) = cli.seed {
                hcfg.seed = seed;
            }
            if no_reference {
                hcfg.use_reference = false;
            }
            let id = composite.file_stem().map_or_else(|| "composite".into(), |s| s.to_string_lossy().into_owned());
            let target = target.map(load_image).transpose()?;
            let sample = CompositeSample::new(id, load_image(&composite)?, load_mask(&mask)?, target)?;
            let reference = reference
                .map(|p| -> anyhow::Result<_> {
                    let rid = p.file_stem().map_or_else(|| "reference".into(), |s| s.to_string_lossy().into_owned());
                    Ok((rid, load_image(&p)?))
                })
                .transpose()?;
            let provider = features.provider();
            let result = harmonize_with(
                &sample,
                reference.as_ref().map(|(id, img)| (id.as_str(), img)),
                &hcfg,
                provider.as_ref(),
            )?;
            save_image(&result.image, &out)?;
            if let Some(dir) = dump_attention {
                result.attention.dump(&dir)?;
            }
            if let Some(t) = &sample.target {
                let mse = metrics::mse_255(&result.image, t)?;
                println!("mse {mse:.4} psnr {:.4}", metrics::psnr_from_mse(mse));
            }
        }
        Command::Augment {
            manifest,
            out,
            draws,
            index,
            features,
        } => {
            let seed = require_seed(cli.seed, "augment")?;
            let manifest = load_manifest(&manifest)?;
            let acfg = harmony_core::augment::AugmentConfig { seed, ..cfg.augment.clone() };
            let mut records = Vec::new();
            for entry in &manifest.entries {
                let sample = manifest.load_sample(entry, None)?;
                let target = sample
                    .target
                    .as_ref()
                    .ok_or_else(|| anyhow!("sample {} has no target to augment", entry.id))?;
                for draw in 0..draws {
                    let aug = augment_reference(target, &sample.mask, &entry.id, &acfg, draw)?;
                    let file = format!("{}_{draw:03}.png", entry.id);
                    save_image(&aug.image, out.join(&file))?;
                    records.push(AugmentRecord {
                        sample: entry.id.clone(),
                        draw,
                        file,
                        window: aug.window,
                        flipped: aug.flipped,
                    });
                }
            }
            write_json(&records, Some(&out.join("augmented.json")))?;
            if let Some(index) = index {
                let index = GalleryIndex::load(&index)?;
                let mix = harmony_core::augment::MixConfig { mix_seed: seed, ..cfg.mix };
                let tm = build_training_manifest(&manifest, &index, features.provider().as_ref(), &cfg.retrieval, &mix)?;
                tm.save(out.join("training_manifest.json"))?;
            }
            println!("wrote {} augmented references to {}", records.len(), out.display());
        }
        Command::BuildBenchmark {
            manifest,
            out,
            patch_size,
            working_size,
            features,
        } => {
            let spec = BenchmarkSpec {
                source_manifest: manifest,
                gallery_policy: GalleryPolicy::TargetsAsGallery,
                retrieval: cfg.retrieval.clone(),
                output_dir: out.clone(),
                patch_size,
                working_size,
            };
            let bench = build_benchmark(&spec, features.provider().as_ref())?;
            println!(
                "kept {} of the source samples; manifest at {}",
                bench.retained.len(),
                out.join("manifest.json").display()
            );
        }
        Command::Evaluate {
            manifest,
            index,
            runs,
            non_reference,
            identity,
            eval_size,
            out,
            features,
        } => {
            let seed = require_seed(cli.seed, "evaluate")?;
            let manifest = load_manifest(&manifest)?;
            let provider = features.provider();
            let index = match index {
                Some(dir) => GalleryIndex::load(dir)?,
                None => GalleryIndex::empty(provider.tag(), DEFAULT_PATCH_SIZE, WORKING_SIZE, 0),
            };
            let backend = if identity {
                Backend::Identity
            } else {
                let mut h = cfg.harmonize.clone();
                h.use_reference &= !non_reference;
                Backend::Harmonize(h)
            };
            let opts = EvalOptions {
                backend,
                runs,
                seed,
                eval_size: (eval_size > 0).then_some(eval_size),
            };
            let report = evaluate(&manifest, &index, provider.as_ref(), &cfg.retrieval, &opts)?;
            if let Some(path) = out {
                report.save(path)?;
            }
            print!("{}", report.table());
        }
        Command::SgfCheck { draws, dump } => {
            let seed = require_seed(cli.seed, "sgf-check")?;
            let started = std::time::Instant::now();
            let report = check::run_suite(seed, draws)?;
            for o in &report.outcomes {
                println!(
                    "{} {:<28} max_error={:.3e} {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.max_error,
                    o.detail
                );
            }
            println!("{} draws in {:.2?}", draws, started.elapsed());
            if let Some(dir) = dump {
                check::golden_bundle()?.dump(&dir)?;
            }
            if !report.passed() {
                return Err(Failure::Invariant("attention invariant suite failed".into()));
            }
        }
        Command::MakeFixtures { out } => {
            let seed = require_seed(cli.seed, "make-fixtures")?;
            let set = make_fixtures(&out, seed)?;
            println!(
                "wrote {} files ({} main samples, {} ablation cases) to {}",
                set.checksums.len(),
                set.main.entries.len(),
                set.ablation.entries.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVARIANT)
        }
    }
}
