//! Command-line front end: preprocess, split, train, generate, eval, bench.
//!
//! Exit codes are a stable contract: 0 on success, 1 when some inputs failed
//! or training diverged, 2 for usage errors (bad flags, missing inputs).
//! Every run writes `run.json` into its output directory with the exact
//! arguments, so a run can be repeated from that file alone.

pub mod bench;
mod commands;
pub mod report;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use voxdiff::PredictionKind;

pub use commands::{parse_named_path, volume_files};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "VOXDIFF_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "voxdiff", version, about = "Volumetric diffusion models for brain MRI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Reorient, resample, pad/crop and quantize every QA-passed record.
    Preprocess(PreprocessArgs),
    /// Assign subjects to train / test-internal / test-external.
    Split(SplitArgs),
    /// Train a U-Net on the train split.
    Train(TrainArgs),
    /// Generate volumes with DDIM from saved weights.
    Generate(GenerateArgs),
    /// Evaluate generated volumes against real ones.
    Eval(EvalArgs),
    /// Time generation for several step counts.
    Bench(BenchArgs),
    /// Write weights for the closed-form Gaussian denoiser.
    Oracle(OracleArgs),
}

impl Command {
    fn out_dir(&self) -> &PathBuf {
        match self {
            Command::Preprocess(a) => &a.out,
            Command::Split(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Generate(a) => &a.out,
            Command::Eval(a) => match &a.mode {
                EvalMode::Fid(m) => &m.out,
                EvalMode::Ks(m) => &m.out,
                EvalMode::Nn(m) => &m.out,
            },
            Command::Bench(a) => &a.out,
            Command::Oracle(a) => &a.out,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    pub test_fraction: f64,
    /// Datasets held out entirely as external test data.
    #[arg(long, value_delimiter = ',', default_value = "AIBL,SLEEP")]
    pub withheld: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Manifest of preprocessed volumes; the train split is used, or every
    /// QA-passed record when no split is assigned.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub kind: PredictionKind,
    /// Start from the desk-scale preset (batch 4, 200 epochs, larger step).
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,16")]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub temb_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub norm_groups: usize,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_nan_epoch: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    pub steps: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Output grid, e.g. 192,224,192.
    #[arg(long, value_delimiter = ',', default_value = "192,224,192")]
    pub shape: Vec<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub mode: EvalMode,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EvalMode {
    /// Pairwise Frechet distance over triplanar slice features.
    Fid(FidArgs),
    /// KS subsampling protocol over regional volumes.
    Ks(KsArgs),
    /// Nearest training volumes of each generated volume.
    Nn(NnArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct FidArgs {
    /// NAME=PATH of a real group; PATH is a directory of .nii volumes or a
    /// feature file. Repeatable.
    #[arg(long, required = true)]
    pub real: Vec<String>,
    /// NAME=PATH of a generated group. Repeatable.
    #[arg(long)]
    pub synth: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub slice_spacing_mm: f64,
    #[arg(long, default_value = voxdiff::eval::DEFAULT_EXTRACTOR)]
    pub extractor: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct KsArgs {
    /// Regional volumes CSV (volume_id,structure,mm3) of real volumes.
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub synth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub subsample: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct NnArgs {
    /// A .nii file or a directory of them.
    #[arg(long)]
    pub query: PathBuf,
    /// A directory of .nii volumes or a manifest (.jsonl).
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Weights to time; the Gaussian oracle is used when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64",
          value_parser = clap::value_parser!(u32).range(1..))]
    pub steps: Vec<u32>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "192,224,192")]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
    #[arg(long, default_value = "velocity")]
    pub kind: PredictionKind,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Some inputs failed, or training diverged; outputs were still written.
    Partial,
}

/// A problem with the invocation rather than with the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn worker_count() -> Result<Option<usize>, UsageError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(UsageError(format!(
                "{WORKERS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let workers = match worker_count() {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };

    let started = Instant::now();
    let result = pool.install(|| commands::dispatch(&cli.command));
    let code = match &result {
        Ok(Status::Success) => 0,
        Ok(Status::Partial) => 1,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => 2,
        Err(_) => 1,
    };
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    if code != 2 {
        let manifest = report::RunManifest::new(
            &argv,
            &cli.command,
            pool.current_num_threads(),
            code,
            started.elapsed().as_secs_f64(),
        );
        if let Err(e) = manifest.write(cli.command.out_dir()) {
            eprintln!("warning: could not write run manifest: {e:#}");
        }
    }
    code
}
