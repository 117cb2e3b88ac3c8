//! `pivdiff` command-line front end.
//!
//! Every command resolves a [`RunConfig`] (defaults, then `--config`, then
//! `--set` overrides, then flag shorthands) and writes it as `config.toml`
//! into its output directory.

pub mod config;
mod eval;
mod gen;
mod predict;
mod report;
mod train;

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pivdiff_core::flow_io::DatasetManifest;
use pivdiff_core::Split;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Training(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub(crate) fn input(e: impl Display) -> Self {
        CliError::Input(e.to_string())
    }

    pub(crate) fn internal(e: impl Display) -> Self {
        CliError::Internal(e.to_string())
    }

    pub(crate) fn io(path: &Path, e: impl Display) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "pivdiff", version, about = "Diffusion-based PIV flow estimation toolkit")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for generation, training and inference noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (dataset root for `gen`, parent of run directories for `train`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Config override, e.g. `--set train.total_steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic particle image pairs with known flow.
    Gen(GenArgs),
    /// Fine-tune the flow network on a dataset manifest.
    Train(TrainArgs),
    /// Estimate flow with a trained checkpoint.
    Infer(InferArgs),
    /// Estimate flow with multipass window-deformation cross-correlation.
    Baseline(InputArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Merge evaluation reports into one comparison table.
    Report(RunDirs),
    /// Quiver and residual figures from evaluation runs.
    Plot(RunDirs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Comma-separated `kind[:params]` specs, e.g. `uniform:3,0,rotation`.
    #[arg(long)]
    pub flows: Option<String>,
    #[arg(long)]
    pub per_flow: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Start from these weights; prints the remap audit.
    #[arg(long, value_name = "CHECKPOINT")]
    pub init_from: Option<PathBuf>,
    /// Run directory name instead of a timestamp.
    #[arg(long)]
    pub run_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    /// A single image pair instead of a manifest split.
    #[arg(long, num_args = 2, value_names = ["IMG1", "IMG2"])]
    pub pair: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub upsample_factor: Option<usize>,
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction directory, or a run directory holding `pred/`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Baseline predictions for the reduction line.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub baseline_method: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct RunDirs {
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
}

/// Reads `data.manifest`; relative paths resolve against the working directory.
pub(crate) fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Input("no dataset manifest: pass --manifest or set data.manifest".into()))?;
    if !path.is_file() {
        return Err(CliError::Input(format!("manifest {} does not exist", path.display())));
    }
    DatasetManifest::read(path).map_err(CliError::input)
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", dir.display())))
}

pub(crate) fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Prediction file of sample `id` below `dir`.
pub(crate) fn pred_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.flo"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = cli.threads {
        cfg.runtime.threads = n;
    }
    if cfg.runtime.threads > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.runtime.threads).build_global();
    }
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Gen(a) => {
            if let Some(f) = &a.flows {
                cfg.data.synth.flows = gen::split_flow_list(f);
            }
            if let Some(n) = a.per_flow {
                cfg.data.synth.per_flow = n;
            }
            cfg.validate()?;
            gen::run(&cfg, &out("data"))
        }
        Command::Train(a) => {
            if let Some(m) = a.manifest {
                cfg.data.manifest = Some(m);
            }
            if let Some(p) = a.init_from {
                cfg.init_from = Some(p);
            }
            cfg.validate()?;
            train::run(&mut cfg, &out("runs"), a.run_name.as_deref()).map(|_| ())
        }
        Command::Infer(a) => {
            if let Some(c) = a.checkpoint {
                cfg.infer.checkpoint = Some(c);
            }
            apply_input(&mut cfg, &a.input);
            cfg.validate()?;
            predict::infer(&mut cfg, &out("runs/infer"), a.input.pair.as_deref(), a.upsample_factor)
        }
        Command::Baseline(a) => {
            apply_input(&mut cfg, &a);
            cfg.validate()?;
            predict::baseline(&cfg, &out("runs/baseline"), a.pair.as_deref())
        }
        Command::Eval(a) => {
            if let Some(m) = a.manifest {
                cfg.data.manifest = Some(m);
            }
            if let Some(s) = a.split {
                cfg.data.split = s;
            }
            if let Some(p) = a.pred {
                cfg.eval.pred_dir = Some(p);
            }
            if let Some(b) = a.baseline {
                cfg.eval.baseline_dir = Some(b);
            }
            if let Some(m) = a.method {
                cfg.eval.method = m;
            }
            if let Some(m) = a.baseline_method {
                cfg.eval.baseline_method = m;
            }
            cfg.validate()?;
            eval::run(&mut cfg, &out("runs/eval"))
        }
        Command::Report(r) => report::report(&r.run_dirs, &out("runs/report")),
        Command::Plot(r) => report::plot(&r.run_dirs, &out("runs/plot")),
    }
}

fn apply_input(cfg: &mut RunConfig, a: &InputArgs) {
    if let Some(m) = &a.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(s) = a.split {
        cfg.data.split = s;
    }
}
