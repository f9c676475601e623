//! Command-line front end for quadtree mask refinement.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use quadmask_core::pipeline::Propagation;
use quadmask_core::Error;

use crate::commands::{apply_refine_flags, parse_split};
use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "quadmask", version, about = "Quadtree refinement of coarse instance masks")]
pub struct Cli {
    /// `key=value` config file; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-sample work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth,
    /// Incoherence statistics of the coarse masks.
    Analyze { manifest: Option<PathBuf> },
    /// Fill the incoherent tree with ground truth and score it.
    Oracle {
        manifest: Option<PathBuf>,
        /// Take detections from this checkpoint instead of the ground truth.
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Train the detector and refiner.
    Train { manifest: Option<PathBuf> },
    /// Refine masks with a trained checkpoint.
    Refine {
        checkpoint: Option<PathBuf>,
        manifest: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=3))]
        depth: Option<u64>,
        #[arg(long, value_parser = parse_propagation)]
        propagation: Option<Propagation>,
        /// train | test | all
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score predicted masks against the ground truth.
    Eval {
        predictions: PathBuf,
        manifest: Option<PathBuf>,
        /// train | test | all
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Cost model of sparse refinement against dense grids.
    Bench {
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_propagation(s: &str) -> Result<Propagation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn resolve(cli: &Cli) -> quadmask_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.set("jobs", &j.to_string())?;
    }
    let set_path = |slot: &mut Option<PathBuf>, p: &Option<PathBuf>| {
        if p.is_some() {
            *slot = p.clone();
        }
    };
    match &cli.command {
        Command::Analyze { manifest } | Command::Train { manifest } | Command::Eval { manifest, .. } => {
            set_path(&mut cfg.manifest, manifest)
        }
        Command::Oracle { manifest, .. } => set_path(&mut cfg.manifest, manifest),
        Command::Refine {
            checkpoint,
            manifest,
            depth,
            propagation,
            ..
        } => {
            set_path(&mut cfg.checkpoint, checkpoint);
            set_path(&mut cfg.manifest, manifest);
            apply_refine_flags(&mut cfg, depth.map(|d| d as usize), *propagation)?;
        }
        Command::Bench { manifest, checkpoint } => {
            set_path(&mut cfg.manifest, manifest);
            set_path(&mut cfg.checkpoint, checkpoint);
        }
        Command::Synth => {}
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Config(format!("out {}: {e}", cfg.out.display())))?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> quadmask_core::Result<commands::Outcome> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Analyze { .. } => commands::cmd_analyze(&cfg),
        Command::Oracle { detector, .. } => commands::cmd_oracle(&cfg, detector.as_deref()),
        Command::Train { .. } => commands::cmd_train(&cfg),
        Command::Refine { split, .. } => commands::cmd_refine(&cfg, parse_split(split)?),
        Command::Eval { predictions, split, .. } => commands::cmd_eval(&cfg, predictions, parse_split(split)?),
        Command::Bench { .. } => commands::cmd_bench(&cfg).map(|_| commands::Outcome::default()),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(o) if o.skipped > 0 => {
            eprintln!("{} sample(s) skipped", o.skipped);
            EXIT_DATA
        }
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
