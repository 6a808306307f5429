//! The `report` step: reshapes evaluation summaries into one long-format
//! table per figure.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::data::write_bytes;
use crate::evaluate::{to_csv, InnovationRow, SummaryRow};
use crate::layout::Layout;

pub const DECILE_CURVES: &str = "fig_decile_curves.csv";
pub const OVERALL: &str = "fig_overall.csv";
pub const PERIODS: &str = "fig_periods.csv";
pub const INNOVATION_BARS: &str = "fig_innovation.csv";

/// RCP per decile, one curve per (group, period, algorithm, strategy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub group: String,
    pub period: String,
    pub algorithm: String,
    pub strategy: String,
    pub decile: u32,
    pub rcp_mean: f64,
    pub rcp_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub group: String,
    pub mode: Mode,
    pub window: String,
    pub period: String,
    pub algorithm: String,
    pub strategy: String,
    pub perplexity_mean: f64,
    pub perplexity_std: Option<f64>,
    pub rcp_mean: f64,
    pub rcp_std: Option<f64>,
}

/// Overall RCP of continual runs after each period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRow {
    pub algorithm: String,
    pub strategy: String,
    pub period: String,
    pub rcp_mean: f64,
    pub rcp_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationBar {
    pub decile: String,
    pub seen_self: f64,
    pub seen_others: f64,
    pub new: f64,
}

#[derive(Debug, Default)]
pub struct ReportOutcome {
    pub files: Vec<PathBuf>,
}

pub fn report(layout: &Layout) -> Result<ReportOutcome> {
    let summary_path = layout.summary();
    ensure!(
        summary_path.exists(),
        "no evaluation results in {} (run `fedsim eval` first)",
        layout.root().display()
    );
    let summary: Vec<SummaryRow> = read_csv(&summary_path)?;
    ensure!(!summary.is_empty(), "{} has no rows", summary_path.display());

    let mut curves = Vec::new();
    let mut overall = Vec::new();
    let mut periods = Vec::new();
    for row in &summary {
        match row.decile.parse::<u32>() {
            Ok(decile) => curves.push(CurveRow {
                group: row.group.clone(),
                period: row.period.clone(),
                algorithm: row.algorithm.clone(),
                strategy: row.strategy.clone(),
                decile,
                rcp_mean: row.rcp_mean,
                rcp_std: row.rcp_std,
            }),
            Err(_) => {
                overall.push(OverallRow {
                    group: row.group.clone(),
                    mode: row.mode,
                    window: row.window.clone(),
                    period: row.period.clone(),
                    algorithm: row.algorithm.clone(),
                    strategy: row.strategy.clone(),
                    perplexity_mean: row.perplexity_mean,
                    perplexity_std: row.perplexity_std,
                    rcp_mean: row.rcp_mean,
                    rcp_std: row.rcp_std,
                });
                if row.mode == Mode::Continual {
                    periods.push(PeriodRow {
                        algorithm: row.algorithm.clone(),
                        strategy: row.strategy.clone(),
                        period: row.period.clone(),
                        rcp_mean: row.rcp_mean,
                        rcp_std: row.rcp_std,
                    });
                }
            }
        }
    }

    let dir = layout.report();
    let mut outcome = ReportOutcome::default();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        write_bytes(&path, &bytes)?;
        outcome.files.push(path);
        Ok(())
    };
    emit(DECILE_CURVES, to_csv(&curves)?)?;
    emit(OVERALL, to_csv(&overall)?)?;
    if !periods.is_empty() {
        emit(PERIODS, to_csv(&periods)?)?;
    }
    let innovation_path = layout.innovation_summary();
    if innovation_path.exists() {
        let rows: Vec<InnovationRow> = read_csv(&innovation_path)?;
        let bars: Vec<InnovationBar> = rows
            .into_iter()
            .map(|r| InnovationBar {
                decile: r.decile,
                seen_self: r.seen_self,
                seen_others: r.seen_others,
                new: r.new,
            })
            .collect();
        emit(INNOVATION_BARS, to_csv(&bars)?)?;
    }
    Ok(outcome)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}
