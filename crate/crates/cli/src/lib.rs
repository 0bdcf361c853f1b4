//! Command-line front end: similarity, schedule, estimate, run, simulate
//! and ablate.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dualcurr::dec::{ScheduleMode, DEFAULT_PHASES};
use dualcurr::sim::WorldSpec;

use crate::commands::ScheduleInput;
use crate::config::{Overrides, RunConfig};
use crate::error::{Failure, Outcome};

#[derive(Debug, Parser)]
#[command(
    name = "dualcurr",
    version,
    about = "Curriculum pseudo-label filtering for multi-domain detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-domain similarity and predicted-box counts, as CSV
    Similarity {
        /// Prediction stream (JSON lines); repeat for several files
        #[arg(long, required = true)]
        predictions: Vec<PathBuf>,
        /// Class and domain catalog (TOML)
        #[arg(long)]
        catalog: PathBuf,
        /// Output CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Split unlabeled data into curriculum phases
    Schedule {
        /// Prediction stream; repeat for several files
        #[arg(long, conflicts_with = "stats", required_unless_present = "stats")]
        predictions: Vec<PathBuf>,
        /// Stats CSV from `similarity` (domain mode only)
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        catalog: PathBuf,
        /// Schedule unit
        #[arg(long, default_value = "domain", value_parser = parse_mode)]
        mode: ScheduleMode,
        /// Number of phases
        #[arg(long, default_value_t = DEFAULT_PHASES)]
        phases: usize,
        /// Output JSON
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-distribution estimates of the unlabeled domains, as CSV
    Estimate {
        #[arg(long)]
        catalog: PathBuf,
        /// COCO-style ground truth covering the labeled domain
        #[arg(long)]
        ground_truth: PathBuf,
        /// Image file name to domain id (JSON object)
        #[arg(long)]
        sidecar: PathBuf,
        /// Predictions on labeled and unlabeled domains; repeat for several files
        #[arg(long, required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full curriculum run: every phase, all artifacts
    Run {
        /// Run config (TOML)
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic world and detector output
    Simulate {
        /// World spec (TOML); the built-in eight-domain world when absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// World seed (detector seed follows as seed + 1 for the built-in world)
        #[arg(long)]
        seed: Option<u64>,
        /// Images per domain for the built-in world
        #[arg(long, default_value_t = 2000)]
        images: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of tau and mu values and write one metrics row per cell
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated tau values
        #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.7, 0.8])]
        taus: Vec<f64>,
        /// Comma-separated mu values
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.10, 0.15])]
        mus: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<ScheduleMode, String> {
    s.parse().map_err(|e: dualcurr::Error| e.to_string())
}

fn load_run_config(path: &std::path::Path, overrides: &Overrides) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.params.apply(overrides);
    cfg.params.validate()?;
    Ok(cfg)
}

/// Executes one parsed command.
pub fn dispatch(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Similarity {
            predictions,
            catalog,
            out,
        } => commands::cmd_similarity(&predictions, &catalog, &out),
        Command::Schedule {
            predictions,
            stats,
            catalog,
            mode,
            phases,
            out,
        } => {
            let input = match &stats {
                Some(s) => ScheduleInput::Stats(s),
                None => ScheduleInput::Predictions(&predictions),
            };
            commands::cmd_schedule(input, &catalog, mode, phases, &out).map(|_| ())
        }
        Command::Estimate {
            catalog,
            ground_truth,
            sidecar,
            predictions,
            out,
        } => commands::cmd_estimate(&catalog, &ground_truth, &sidecar, &predictions, &out)
            .map(|_| ()),
        Command::Run {
            config,
            overrides,
            out,
        } => {
            let cfg = load_run_config(&config, &overrides)?;
            commands::cmd_run(&cfg, &out).map(|_| ())
        }
        Command::Simulate {
            config,
            seed,
            images,
            out,
        } => {
            let spec = match config {
                Some(path) => {
                    let mut spec = WorldSpec::load(&path)
                        .map_err(Failure::from)
                        .map_err(|e| e.context(format!("world spec {}", path.display())))?;
                    if let Some(s) = seed {
                        spec.seed = s;
                        spec.detector_seed = s.wrapping_add(1);
                    }
                    spec
                }
                None => {
                    if images == 0 {
                        return Err(Failure::validation("--images must be positive"));
                    }
                    WorldSpec::standard(seed.unwrap_or(0), images)
                }
            };
            commands::cmd_simulate(&spec, &out).map(|_| ())
        }
        Command::Ablate {
            config,
            overrides,
            taus,
            mus,
            out,
        } => {
            let cfg = load_run_config(&config, &overrides)?;
            commands::cmd_ablate(&cfg, &taus, &mus, &out).map(|_| ())
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
