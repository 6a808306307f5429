//! Argument parsing and exit codes.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Preset};
use crate::evaluate::{eval, EvalOptions};
use crate::layout::Layout;
use crate::report::report;
use crate::train::{train, TrainOptions};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

/// Caps worker parallelism when set.
pub const THREADS_VAR: &str = "FEDSIM_THREADS";

const DEFAULT_OUT: &str = "fedsim-out";

#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Activity-based device selection for federated learning")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON). Mutually exclusive with --preset.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    pub preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run a single replication seed instead of the configured list.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overwrite existing datasets and checkpoints.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one dataset per replication seed.
    Gen,
    /// Train every configured run and write checkpoints and manifests.
    Train {
        /// Record wall time in manifests (outputs are then no longer reproducible).
        #[arg(long)]
        record_time: bool,
    },
    /// Evaluate checkpoints on the test window and compute RCP.
    Eval {
        /// Fail unless the innovation metric can be computed.
        #[arg(long)]
        innovation: bool,
    },
    /// Turn evaluation summaries into per-figure tables.
    Report,
    /// Print the resolved config as JSON.
    Config,
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = match thread_pool() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cfg = match resolve_config(&cli.global) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let outcome = match pool {
        Some(pool) => pool.install(|| run(&cli, &cfg)),
        None => run(&cli, &cfg),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(None);
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .with_context(|| format!("{THREADS_VAR} must be a positive integer, got {value:?}"))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(Some(pool))
}

pub fn resolve_config(args: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
        (Some(path), None) => ExperimentConfig::from_path(path)?,
        (None, preset) => ExperimentConfig::preset(preset.as_deref().unwrap_or("desk").parse::<Preset>()?),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<ExitCode> {
    let out = cfg.output_dir.clone().unwrap_or_else(|| DEFAULT_OUT.into());
    let layout = Layout::new(out);
    match &cli.command {
        Command::Gen => {
            for s in crate::data::gen(cfg, &layout, cli.global.force)? {
                println!(
                    "seed {}: {} devices ({} active), {} utterances, max/min activity {:.0} -> {}",
                    s.seed,
                    s.devices,
                    s.active_devices,
                    s.utterances,
                    s.activity_ratio,
                    s.path.display()
                );
            }
        }
        Command::Train { record_time } => {
            let opts = TrainOptions {
                force: cli.global.force,
                record_time: *record_time,
            };
            let outcome = train(cfg, &layout, opts)?;
            println!("trained {} runs", outcome.completed.len());
            if !outcome.failed.is_empty() {
                for (label, e) in &outcome.failed {
                    eprintln!("failed: {label}: {e:#}");
                }
                eprintln!("{} of {} runs failed", outcome.failed.len(), outcome.failed.len() + outcome.completed.len());
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
        Command::Eval { innovation } => {
            let opts = EvalOptions {
                require_innovation: *innovation,
            };
            let outcome = eval(cfg, &layout, opts)?;
            for m in &outcome.missing {
                eprintln!("warning: no checkpoint for {m}");
            }
            println!(
                "evaluated {} checkpoints, {} summary rows{}",
                outcome.checkpoints,
                outcome.summary_rows,
                if outcome.innovation { ", innovation table" } else { "" }
            );
        }
        Command::Report => {
            for path in report(&layout)?.files {
                println!("{}", path.display());
            }
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(cfg)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
