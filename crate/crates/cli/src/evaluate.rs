//! The `eval` step: decile perplexity and RCP per checkpoint, then mean and
//! sample standard deviation across replication seeds.

use std::collections::BTreeMap;

use anyhow::{bail, ensure, Context, Result};
use fedsim_core::eval::{write_decile_csv, write_innovation_csv, Triple};
use fedsim_core::models::load_checkpoint;
use fedsim_core::population::segment_periods;
use fedsim_core::{evaluate, innovation, rcp, restrict_to_window, DecileReport, InnovationReport, RcpReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode, RunId};
use crate::data::{load_dataset, write_bytes};
use crate::layout::{Layout, CHECKPOINT, DECILE_REPORT};

/// One row of `eval/summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub mode: Mode,
    pub window: String,
    pub period: String,
    pub algorithm: String,
    pub strategy: String,
    /// `1`..`10` or `overall`.
    pub decile: String,
    pub seeds: usize,
    pub perplexity_mean: f64,
    pub perplexity_std: Option<f64>,
    pub rcp_mean: f64,
    pub rcp_std: Option<f64>,
    pub baseline: String,
}

/// One row of `eval/innovation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationRow {
    pub decile: String,
    pub seeds: usize,
    pub seen_self: f64,
    pub seen_others: f64,
    pub new: f64,
    pub seen_self_std: Option<f64>,
    pub seen_others_std: Option<f64>,
    pub new_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Fail when the innovation metric cannot be computed instead of skipping it.
    pub require_innovation: bool,
}

#[derive(Debug, Default)]
pub struct EvalOutcome {
    pub checkpoints: usize,
    pub missing: Vec<String>,
    pub summary_rows: usize,
    pub innovation: bool,
}

/// Evaluated checkpoint: run, period index (0 for one-shot), report.
type Evaluated = (usize, usize, DecileReport);

pub fn eval(cfg: &ExperimentConfig, layout: &Layout, opts: EvalOptions) -> Result<EvalOutcome> {
    cfg.validate()?;
    let runs = cfg.runs();
    let segments = if cfg.modes.contains(&Mode::Continual) {
        cfg.continual.segments()
    } else {
        0
    };
    if opts.require_innovation && segments < 2 {
        bail!("innovation needs a continual run with at least 2 segments, config has {segments}");
    }

    let mut outcome = EvalOutcome::default();
    // (run, period, decile row) -> per-seed (perplexity, rcp)
    let mut table: BTreeMap<(usize, usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    let mut innovations = Vec::new();
    for &seed in &cfg.seeds {
        let dataset = load_dataset(cfg, layout, seed)?;
        let test = restrict_to_window(&dataset.population, cfg.test_window.to_days()?)?;

        let targets: Vec<(usize, usize)> = runs
            .iter()
            .enumerate()
            .flat_map(|(r, run)| (0..run.period_dirs().len()).map(move |p| (r, p)))
            .collect();
        let evaluated: Vec<Result<Option<Evaluated>>> = targets
            .par_iter()
            .map(|&(r, p)| {
                let path = layout.run_dir(seed, &runs[r]).join(&runs[r].period_dirs()[p]).join(CHECKPOINT);
                if !path.exists() {
                    return Ok(None);
                }
                let params = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
                Ok(Some((r, p, evaluate(&params, &test)?)))
            })
            .collect();
        let mut reports: BTreeMap<(usize, usize), DecileReport> = BTreeMap::new();
        for (item, &(r, p)) in evaluated.into_iter().zip(&targets) {
            match item? {
                Some((r, p, report)) => {
                    reports.insert((r, p), report);
                }
                None => outcome.missing.push(format!("seed {seed} {}/{}", runs[r], runs[r].period_dirs()[p].display())),
            }
        }

        for (&(r, p), report) in &reports {
            let run = &runs[r];
            let base = cfg.baselines.for_mode(run.mode).run();
            let base_index = runs.iter().position(|x| *x == base).expect("baselines are part of the run list");
            let Some(base_report) = reports.get(&(base_index, 0)) else {
                bail!("missing baseline checkpoint for {base} (seed {seed}); train it first");
            };
            let change = rcp(report, base_report.overall.perplexity, base.to_string())?;
            let dir = layout.eval_dir(seed, run).join(&run.period_dirs()[p]);
            write_bytes(&dir.join(DECILE_REPORT), &decile_csv(report, &change)?)?;
            outcome.checkpoints += 1;

            let rows = report.deciles.iter().map(|g| g.perplexity).chain([report.overall.perplexity]);
            let changes = change.deciles.iter().copied().chain([change.overall]);
            for (row, (ppl, c)) in rows.zip(changes).enumerate() {
                table.entry((r, p, row)).or_default().push((ppl, c));
            }
        }

        if segments >= 2 {
            let window = cfg.continual.window.to_days()?;
            let periods = segment_periods(&dataset.population, window, cfg.continual.delta_months)?;
            let report = innovation(&periods)?;
            let mut buf = Vec::new();
            write_innovation_csv(&report, &mut buf)?;
            write_bytes(&layout.eval_seed(seed).join(crate::layout::INNOVATION), &buf)?;
            innovations.push(report);
        }
    }
    ensure!(!table.is_empty(), "no checkpoints found under {}", layout.runs().display());

    let rows = summary_rows(cfg, &runs, &table);
    outcome.summary_rows = rows.len();
    write_bytes(&layout.summary(), &to_csv(&rows)?)?;
    if !innovations.is_empty() {
        write_bytes(&layout.innovation_summary(), &to_csv(&innovation_rows(&innovations))?)?;
        outcome.innovation = true;
    }
    Ok(outcome)
}

fn decile_csv(report: &DecileReport, change: &RcpReport) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_decile_csv(report, Some(change), &mut buf)?;
    Ok(buf)
}

fn decile_label(row: usize, deciles: usize) -> String {
    if row == deciles {
        "overall".into()
    } else {
        (row + 1).to_string()
    }
}

fn summary_rows(
    cfg: &ExperimentConfig,
    runs: &[RunId],
    table: &BTreeMap<(usize, usize, usize), Vec<(f64, f64)>>,
) -> Vec<SummaryRow> {
    let deciles = table.keys().map(|&(_, _, row)| row).max().unwrap_or(0);
    table
        .iter()
        .map(|(&(r, p, row), values)| {
            let run = &runs[r];
            let ppl: Vec<f64> = values.iter().map(|v| v.0).collect();
            let change: Vec<f64> = values.iter().map(|v| v.1).collect();
            SummaryRow {
                group: run.group(),
                mode: run.mode,
                window: run.window.to_string(),
                period: match run.mode {
                    Mode::OneShot => String::new(),
                    Mode::Continual => format!("P{}", p + 1),
                },
                algorithm: run.cell.algorithm.to_string(),
                strategy: run.cell.strategy.to_string(),
                decile: decile_label(row, deciles),
                seeds: values.len(),
                perplexity_mean: mean(&ppl),
                perplexity_std: sample_std(&ppl),
                rcp_mean: mean(&change),
                rcp_std: sample_std(&change),
                baseline: cfg.baselines.for_mode(run.mode).run().to_string(),
            }
        })
        .collect()
}

fn innovation_rows(reports: &[InnovationReport]) -> Vec<InnovationRow> {
    let deciles = reports.iter().map(|r| r.deciles.len()).min().unwrap_or(0);
    let per_row = |pick: &dyn Fn(&InnovationReport) -> Option<Triple>| -> Option<Vec<Triple>> {
        reports.iter().map(pick).collect()
    };
    let mut rows = Vec::new();
    for d in 0..=deciles {
        let triples = if d == deciles {
            per_row(&|r| Some(r.overall))
        } else {
            per_row(&|r| r.deciles[d])
        };
        let Some(triples) = triples else { continue };
        let col = |f: fn(&Triple) -> f64| triples.iter().map(f).collect::<Vec<f64>>();
        let (s, o, n) = (col(|t| t.seen_self), col(|t| t.seen_others), col(|t| t.new));
        rows.push(InnovationRow {
            decile: decile_label(d, deciles),
            seeds: triples.len(),
            seen_self: mean(&s),
            seen_others: mean(&o),
            new: mean(&n),
            seen_self_std: sample_std(&s),
            seen_others_std: sample_std(&o),
            new_std: sample_std(&n),
        });
    }
    rows
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; undefined for fewer than two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().context("flushing csv")
}
