//! `lesionsynth` command line: argument parsing, exit codes and manifests.

pub mod config;
mod stages;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use lesionsynth::io::RunManifest;
use lesionsynth::Error;
use thiserror::Error;

pub use config::PipelineConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::Shape { .. }
                | Error::Format { .. }
                | Error::MissingCheckpoint(_) => EXIT_VALIDATION,
                _ => EXIT_RUNTIME,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lesionsynth", version, about = "Synthetic lesion-image pipeline")]
pub struct Cli {
    /// TOML run configuration; missing tables use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural lesion dataset.
    GenToyData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        shifted: bool,
    },
    /// Embed image/mask pairs, run k-means and write the registry.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train a denoiser on a dataset or on one cluster of it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, requires = "cluster")]
        registry: Option<PathBuf>,
        #[arg(long, requires = "registry")]
        cluster: Option<usize>,
        /// Start from this checkpoint instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// RePaint new lesions into every source image.
    Inpaint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
        /// `cluster` or `full`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        /// Use only the first N sources (sorted by id).
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Restyle inpainted images toward their sources.
    Stylize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        inpainted: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// FID and within-set MS-SSIM of each set against a reference.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        /// `TAG=DIR`, repeatable.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Train the segmentation net.
    SegTrain {
        #[arg(long)]
        data: PathBuf,
        /// Synthetic variants named `<real id>_synth<k>[_styled]` for augmentation.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        r: Option<usize>,
        /// Replace the color channels with Gaussian noise, keeping masks.
        #[arg(long)]
        noise_baseline: bool,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Dice and IoU of a segmentation checkpoint on a test set.
    SegTest {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Collect eval and seg-test outputs into tables.
    Report {
        #[arg(long)]
        eval: Option<PathBuf>,
        /// `TAG=DIR` of a seg-test output, repeatable (one per seed).
        #[arg(long = "seg")]
        segs: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenToyData { .. } => "gen-toy-data",
            Command::Cluster { .. } => "cluster",
            Command::Train { .. } => "train",
            Command::Inpaint { .. } => "inpaint",
            Command::Stylize { .. } => "stylize",
            Command::Eval { .. } => "eval",
            Command::SegTrain { .. } => "seg-train",
            Command::SegTest { .. } => "seg-test",
            Command::Report { .. } => "report",
        }
    }
}

/// Argv as recorded in the manifest: the output directory is replaced by a
/// placeholder so reruns into another directory compare equal.
fn recorded_argv(argv: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--out" {
            out.push(a.clone());
            if it.next().is_some() {
                out.push("<out>".into());
            }
        } else if a.starts_with("--out=") {
            out.push("--out=<out>".into());
        } else {
            out.push(a.clone());
        }
    }
    out
}

/// Parses `argv` (program name first), runs the stage and returns the exit
/// code. Errors go to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    let strings: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &strings) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("--out <dir> is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let mut manifest = RunManifest {
        command: cli.command.name().to_string(),
        argv: recorded_argv(argv),
        master_seed: cfg.seed,
        started_unix,
        ..RunManifest::default()
    };
    let result = stages::run_stage(&cli.command, &mut cfg, &out, &mut manifest);
    manifest.config = cfg.to_toml();
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    match result {
        Ok(outputs) => {
            manifest.record_outputs(&out, &outputs)?;
            manifest.write(&out)?;
            Ok(())
        }
        Err(e) => {
            manifest.warnings.push(format!("aborted: {e}"));
            let _ = manifest.write(&out);
            Err(e)
        }
    }
}
