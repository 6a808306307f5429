//! The `train` step: one checkpoint, manifest and diagnostics file per run
//! (per period for continual runs).

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fedsim_core::engine::RunResult;
use fedsim_core::models::write_checkpoint;
use fedsim_core::{init_params, run_continual, run_one_shot, ModelParams, RoundConfig, SelectionStrategy};
use fedsim_core::{Algorithm, RoundDiagnostics};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig, ModelConfig, Mode, MonthWindow, RunId};
use crate::data::{load_dataset, write_bytes, write_config, Dataset};
use crate::layout::{Layout, CHECKPOINT, DIAGNOSTICS, MANIFEST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fedsim_version: String,
    pub config_hash: String,
    pub run: String,
    pub mode: Mode,
    pub train_window: MonthWindow,
    pub delta_months: Option<u32>,
    /// 1-based continual period.
    pub period: Option<u32>,
    /// Months this checkpoint was trained on.
    pub data_window: MonthWindow,
    pub algorithm: Algorithm,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub init_seed: u64,
    pub dataset: DatasetRef,
    pub model: ModelConfig,
    pub round: RoundConfig,
    pub rounds_executed: usize,
    pub skipped_rounds: usize,
    pub first_mean_local_loss: Option<f64>,
    pub last_mean_local_loss: Option<f64>,
    pub initial_params_sha256: String,
    pub checkpoint_sha256: String,
    /// Only recorded on request, since it makes outputs irreproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub force: bool,
    pub record_time: bool,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub completed: Vec<String>,
    pub failed: Vec<(String, anyhow::Error)>,
}

pub fn train(cfg: &ExperimentConfig, layout: &Layout, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let runs = cfg.runs();
    if !opts.force {
        for &seed in &cfg.seeds {
            for run in &runs {
                let dir = layout.run_dir(seed, run);
                if dir.exists() {
                    bail!("{} already exists (use --force to overwrite)", dir.display());
                }
            }
        }
    }
    let datasets = cfg
        .seeds
        .iter()
        .map(|&seed| load_dataset(cfg, layout, seed))
        .collect::<Result<Vec<_>>>()?;
    write_config(cfg, layout)?;
    let hash = cfg.hash();

    let jobs: Vec<(usize, &RunId)> = (0..cfg.seeds.len())
        .flat_map(|i| runs.iter().map(move |r| (i, r)))
        .collect();
    let results: Vec<(String, Result<()>)> = jobs
        .par_iter()
        .map(|&(i, run)| {
            let seed = cfg.seeds[i];
            let label = format!("seed {seed} {run}");
            log::info!("training {label}");
            let job = Job {
                cfg,
                layout,
                dataset: &datasets[i],
                seed,
                run,
                hash: &hash,
                record_time: opts.record_time,
            };
            (label, job.execute())
        })
        .collect();

    let mut outcome = TrainOutcome::default();
    for (label, result) in results {
        match result {
            Ok(()) => outcome.completed.push(label),
            Err(e) => outcome.failed.push((label, e)),
        }
    }
    Ok(outcome)
}

struct Job<'a> {
    cfg: &'a ExperimentConfig,
    layout: &'a Layout,
    dataset: &'a Dataset,
    seed: u64,
    run: &'a RunId,
    hash: &'a str,
    record_time: bool,
}

impl Job<'_> {
    fn execute(&self) -> Result<()> {
        let pop = &self.dataset.population;
        let init = init_params(self.cfg.model.kind, pop.vocab_size(), self.cfg.model.dim, self.seed)?;
        let round = RoundConfig {
            seed: self.seed,
            ..self.cfg.round.clone()
        };
        let cell = self.run.cell;
        let window = self.run.window.to_days()?;
        let started = Instant::now();
        let results = match self.run.delta_months {
            None => vec![run_one_shot(pop, window, cell.strategy, cell.algorithm, &round, &init)?],
            Some(delta) => run_continual(pop, window, delta, cell.strategy, cell.algorithm, &round, &init)?,
        };
        let elapsed = started.elapsed().as_secs_f64();

        let dir = self.layout.run_dir(self.seed, self.run);
        for (i, (result, sub)) in results.iter().zip(self.run.period_dirs()).enumerate() {
            let period = self.run.delta_months.map(|_| i as u32 + 1);
            let data_window = match self.run.delta_months {
                Some(d) => MonthWindow::new(self.run.window.start + i as u32 * d, self.run.window.start + (i as u32 + 1) * d),
                None => self.run.window,
            };
            let wall = self.record_time.then(|| elapsed / results.len() as f64);
            self.write_outputs(&dir.join(sub), result, &round, period, data_window, wall)?;
        }
        Ok(())
    }

    fn write_outputs(
        &self,
        dir: &Path,
        result: &RunResult,
        round: &RoundConfig,
        period: Option<u32>,
        data_window: MonthWindow,
        wall_time_secs: Option<f64>,
    ) -> Result<()> {
        let checkpoint = checkpoint_bytes(&result.final_params)?;
        let losses: Vec<f64> = result.diagnostics.iter().filter_map(|d| d.mean_local_loss).collect();
        let manifest = Manifest {
            fedsim_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.hash.to_string(),
            run: self.run.to_string(),
            mode: self.run.mode,
            train_window: self.run.window,
            delta_months: self.run.delta_months,
            period,
            data_window,
            algorithm: self.run.cell.algorithm,
            strategy: self.run.cell.strategy,
            seed: self.seed,
            init_seed: self.seed,
            dataset: DatasetRef {
                path: self.dataset.recorded_path.clone(),
                sha256: self.dataset.sha256.clone(),
            },
            model: self.cfg.model,
            round: round.clone(),
            rounds_executed: result.diagnostics.len(),
            skipped_rounds: result.diagnostics.iter().filter(|d| d.skipped).count(),
            first_mean_local_loss: losses.first().copied(),
            last_mean_local_loss: losses.last().copied(),
            initial_params_sha256: hex(&Sha256::digest(checkpoint_bytes(&result.initial_params)?)),
            checkpoint_sha256: hex(&Sha256::digest(&checkpoint)),
            wall_time_secs,
        };
        let mut manifest_text = serde_json::to_string_pretty(&manifest)?;
        manifest_text.push('\n');

        write_bytes(&dir.join(CHECKPOINT), &checkpoint)?;
        write_bytes(&dir.join(DIAGNOSTICS), &diagnostics_csv(&result.diagnostics)?)?;
        write_bytes(&dir.join(MANIFEST), manifest_text.as_bytes())
    }
}

fn checkpoint_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(buf)
}

/// Per-round diagnostics as CSV.
pub fn diagnostics_csv(diagnostics: &[RoundDiagnostics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "cohort_selected", "cohort_trained", "total_count", "mean_local_loss", "skipped"])?;
    for d in diagnostics {
        w.write_record([
            d.round.to_string(),
            d.cohort_selected.to_string(),
            d.cohort_trained.to_string(),
            d.total_count.to_string(),
            d.mean_local_loss.map(|l| l.to_string()).unwrap_or_default(),
            d.skipped.to_string(),
        ])?;
    }
    w.into_inner().context("flushing diagnostics")
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
