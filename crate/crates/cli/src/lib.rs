//! Command-line surface of the tpis pipeline.
//!
//! `prep` caches tensor maps, `train` fits the network, `infer` writes
//! detections, `eval` scores them and `selftest` runs the built-in checks.
//! Exit status is 0 on success, 1 for input or configuration errors and 2
//! when an internal check fails.

pub mod commands;
pub mod config;
pub mod overlay;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tpis::datasets::Split;
use tpis::neuralseg::gradcheck::Perturbation;

use commands::{InferOptions, InferSource};
use config::{Overrides, RunConfig, DEFAULT_CONFIG_TOML};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Check(_) => 2,
        }
    }
}

impl From<tpis::Error> for CliError {
    fn from(e: tpis::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "tpis", version, about = "Contour instance segmentation with multi-scale tensor pooling")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset manifest (JSON lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Output path; its meaning depends on the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Gradient orientations N.
    #[arg(long, global = true)]
    pub orientations: Option<usize>,
    /// Pyramid levels n.
    #[arg(long, global = true)]
    pub levels: Option<usize>,
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Tensors summed into the coherent tensor.
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Focal loss weight.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Focal loss focusing exponent.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "iou-thr", global = true)]
    pub iou_thr: Option<f64>,
    /// Add per-occlusion-level mAP to the report.
    #[arg(long = "by-occlusion", global = true)]
    pub by_occlusion: bool,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            manifest: self.manifest.clone(),
            out: self.out.clone(),
            orientations: self.orientations,
            levels: self.levels,
            sigma: self.sigma,
            top_k: self.topk,
            epochs: self.epochs,
            batch: self.batch,
            alpha: self.alpha,
            gamma: self.gamma,
            seed: self.seed,
            iou_thr: self.iou_thr,
            by_occlusion: self.by_occlusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PerturbArg {
    None,
    ConvBackward,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute and cache tensor maps for every manifest sample (--out is the cache directory).
    Prep,
    /// Train on the cached train split (--out is the model file).
    Train {
        /// Cache directory written by `prep`.
        #[arg(long, value_name = "DIR")]
        cache: PathBuf,
    },
    /// Detect instances with a trained model (--out is the predictions JSON).
    Infer {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Scan files to process instead of a manifest.
        #[arg(long = "image", value_name = "PATH", conflicts_with = "manifest")]
        images: Vec<PathBuf>,
        /// Manifest split to process.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Reuse cached tensor maps when their settings match the model.
        #[arg(long, value_name = "DIR")]
        cache: Option<PathBuf>,
        /// Also write one mask PNG per detection.
        #[arg(long)]
        masks: bool,
        /// Directory for overlay images.
        #[arg(long, value_name = "DIR")]
        overlays: Option<PathBuf>,
    },
    /// Score predictions against the manifest (--out is the report path; .json and .txt are written).
    Eval {
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
    },
    /// Run gradient checks, the tensor oracle and metric identities.
    Selftest {
        #[arg(long, value_enum, default_value = "none", hide = true)]
        perturb: PerturbArg,
    },
    /// Write a synthetic corpus (--out is the target directory).
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        categories: usize,
    },
    /// Print the annotated default configuration.
    Config,
}

fn required(v: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    v.clone().ok_or_else(|| CliError::Input(format!("--{flag} is required (or set it under [paths] in the config)")))
}

/// Executes one parsed command line, printing results to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    match &cli.command {
        Command::Prep => {
            let index = commands::load_manifest(&required(&cfg.paths.manifest, "manifest")?)?;
            let out = required(&cfg.paths.out, "out")?;
            let s = commands::cmd_prep(&index, &out, &cfg.tensor_pool())?;
            println!("prep: {} computed, {} up to date, cache {}", s.computed, s.skipped, out.display());
        }
        Command::Train { cache } => {
            let index = commands::load_manifest(&required(&cfg.paths.manifest, "manifest")?)?;
            let out = required(&cfg.paths.out, "out")?;
            let s = commands::cmd_train(&index, cache, &out, &cfg)?;
            println!(
                "train: {} epochs, final loss {}, train mean Dice {:.4}",
                s.epochs,
                s.final_train_loss.map_or("-".into(), |l| format!("{l:.6}")),
                s.train_dice
            );
            println!("model {}, history {}", s.model.display(), s.history.display());
        }
        Command::Infer {
            model,
            images,
            split,
            cache,
            masks,
            overlays,
        } => {
            let source = if images.is_empty() {
                let index = commands::load_manifest(&required(&cfg.paths.manifest, "manifest")?)?;
                let split = match split {
                    SplitArg::Train => Some(Split::Train),
                    SplitArg::Test => Some(Split::Test),
                    SplitArg::All => None,
                };
                InferSource::Manifest {
                    index,
                    split,
                    cache: cache.clone(),
                }
            } else {
                InferSource::Images(images.clone())
            };
            let out = required(&cfg.paths.out, "out")?;
            let opts = InferOptions {
                masks: *masks,
                overlays: overlays.clone(),
            };
            let preds = commands::cmd_infer(model, &source, &out, &cfg.instancing, &opts)?;
            let n: usize = preds.iter().map(|p| p.detections.len()).sum();
            println!("infer: {} images, {n} detections, written to {}", preds.len(), out.display());
        }
        Command::Eval { predictions } => {
            let index = commands::load_manifest(&required(&cfg.paths.manifest, "manifest")?)?;
            let out = required(&cfg.paths.out, "out")?;
            let report = commands::cmd_eval(predictions, &index, &out, &cfg.eval_options())?;
            print!("{}", report.to_table());
        }
        Command::Selftest { perturb } => {
            let p = match perturb {
                PerturbArg::None => Perturbation::None,
                PerturbArg::ConvBackward => Perturbation::ConvBackward,
            };
            let report = commands::cmd_selftest(p);
            print!("{}", report.summary());
            if !report.all_passed() {
                return Err(CliError::Check("selftest reported failures".into()));
            }
        }
        Command::Synth {
            count,
            height,
            width,
            categories,
        } => {
            let out = required(&cfg.paths.out, "out")?;
            let manifest = commands::cmd_synth(&out, cfg.train.seed, *count, (*height, *width), *categories)?;
            println!("synth: {count} scenes, manifest {}", manifest.display());
        }
        Command::Config => print!("{DEFAULT_CONFIG_TOML}"),
    }
    Ok(())
}
