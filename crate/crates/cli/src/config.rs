//! Experiment configuration and the named presets.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use fedsim_core::population::ActivityDistribution;
use fedsim_core::{Algorithm, DatasetSpec, ModelKind, RoundConfig, SelectionStrategy, TimeWindow};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the replicated datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generate one population per replication seed. The generator seed is
    /// `spec.seed + replication seed`.
    Generate(DatasetSpec),
    /// Use an existing JSON-lines file for every replication seed.
    Path(PathBuf),
}

/// Zero-based months `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MonthWindow {
    pub start: u32,
    pub end: u32,
}

impl MonthWindow {
    pub const fn new(start: u32, end: u32) -> Self {
        MonthWindow { start, end }
    }

    pub fn to_days(self) -> Result<TimeWindow> {
        TimeWindow::months(self.start, self.end).with_context(|| format!("window {self}"))
    }

    pub fn len(self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for MonthWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}-{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OneShot,
    Continual,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::OneShot => "one_shot",
            Mode::Continual => "continual",
        })
    }
}

/// One (algorithm, selection strategy) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub algorithm: Algorithm,
    pub strategy: SelectionStrategy,
}

impl Cell {
    /// Directory name, e.g. `fedavg-log`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.algorithm, self.strategy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualConfig {
    pub window: MonthWindow,
    pub delta_months: u32,
}

impl ContinualConfig {
    pub fn segments(&self) -> u32 {
        if self.delta_months == 0 {
            0
        } else {
            self.window.len() / self.delta_months
        }
    }
}

/// A one-shot run used as the RCP reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineRef {
    pub window: MonthWindow,
    pub algorithm: Algorithm,
    pub strategy: SelectionStrategy,
}

impl BaselineRef {
    pub fn run(&self) -> RunId {
        RunId::one_shot(
            self.window,
            Cell {
                algorithm: self.algorithm,
                strategy: self.strategy,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baselines {
    /// Reference for one-shot runs.
    pub one_shot: BaselineRef,
    /// Reference for continual runs; falls back to `one_shot` when absent.
    #[serde(default)]
    pub continual: Option<BaselineRef>,
}

impl Baselines {
    pub fn for_mode(&self, mode: Mode) -> BaselineRef {
        match mode {
            Mode::OneShot => self.one_shot,
            Mode::Continual => self.continual.unwrap_or(self.one_shot),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub modes: Vec<Mode>,
    /// Training windows for one-shot runs.
    pub one_shot_windows: Vec<MonthWindow>,
    pub continual: ContinualConfig,
    pub test_window: MonthWindow,
    pub cells: Vec<Cell>,
    pub round: RoundConfig,
    /// Replication seeds; each drives data generation, initialization and
    /// training of one replicate.
    pub seeds: Vec<u64>,
    pub baselines: Baselines,
    /// Default output directory. Not part of the experiment's identity, so it
    /// is neither hashed nor written back out.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => bail!("unknown preset {other:?} (expected desk or paper)"),
        }
    }
}

/// Every strategy under both algorithms.
pub fn full_grid() -> Vec<Cell> {
    [Algorithm::FedAvg, Algorithm::FedOpt]
        .into_iter()
        .flat_map(|algorithm| {
            SelectionStrategy::all()
                .into_iter()
                .map(move |strategy| Cell { algorithm, strategy })
        })
        .collect()
}

const TEST_MONTH: MonthWindow = MonthWindow::new(11, 12);
const SIX_MONTHS: MonthWindow = MonthWindow::new(5, 11);

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let continual_baseline = BaselineRef {
            window: SIX_MONTHS,
            algorithm: Algorithm::FedAvg,
            strategy: SelectionStrategy::LogPlusOne,
        };
        match preset {
            Preset::Desk => ExperimentConfig {
                dataset: DatasetSource::Generate(DatasetSpec::default()),
                model: ModelConfig {
                    kind: ModelKind::Bigram,
                    dim: 16,
                },
                modes: vec![Mode::OneShot, Mode::Continual],
                one_shot_windows: vec![SIX_MONTHS],
                continual: ContinualConfig {
                    window: SIX_MONTHS,
                    delta_months: 2,
                },
                test_window: TEST_MONTH,
                cells: full_grid(),
                round: RoundConfig::default(),
                seeds: vec![0, 1, 2],
                baselines: Baselines {
                    one_shot: BaselineRef {
                        window: SIX_MONTHS,
                        algorithm: Algorithm::FedAvg,
                        strategy: SelectionStrategy::Uniform,
                    },
                    continual: Some(continual_baseline),
                },
                output_dir: None,
            },
            Preset::Paper => {
                let eleven = MonthWindow::new(0, 11);
                ExperimentConfig {
                    dataset: DatasetSource::Generate(DatasetSpec {
                        device_count: 10_000,
                        activity: ActivityDistribution {
                            zipf_exponent: 1.8,
                            min_count: 1,
                            max_count: 20_000,
                        },
                        ..DatasetSpec::default()
                    }),
                    one_shot_windows: vec![MonthWindow::new(8, 11), SIX_MONTHS, eleven],
                    round: RoundConfig {
                        cohort_size: 800,
                        ..RoundConfig::default()
                    },
                    baselines: Baselines {
                        one_shot: BaselineRef {
                            window: eleven,
                            algorithm: Algorithm::FedAvg,
                            strategy: SelectionStrategy::Uniform,
                        },
                        continual: Some(continual_baseline),
                    },
                    ..ExperimentConfig::preset(Preset::Desk)
                }
            }
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.cells.is_empty(), "config needs at least one cell");
        ensure!(!self.seeds.is_empty(), "config needs at least one seed");
        ensure!(!self.modes.is_empty(), "config needs at least one mode");
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        ensure!(distinct.len() == self.seeds.len(), "replication seeds must be distinct");
        let mut ids = BTreeSet::new();
        for cell in &self.cells {
            cell.strategy.validate()?;
            ensure!(ids.insert(cell.id()), "duplicate cell {}", cell.id());
        }
        self.round.validate()?;
        ensure!(self.model.dim >= 1, "model dim must be at least 1");

        let range = match &self.dataset {
            DatasetSource::Generate(spec) => {
                spec.validate()?;
                Some(spec.months)
            }
            DatasetSource::Path(_) => None,
        };
        let check = |w: MonthWindow, what: &str| -> Result<()> {
            ensure!(w.start < w.end, "{what} window {w} is empty");
            if let Some(months) = range {
                ensure!(w.end <= months, "{what} window {w} exceeds the {months}-month dataset");
            }
            Ok(())
        };
        check(self.test_window, "test")?;
        if self.modes.contains(&Mode::OneShot) {
            ensure!(!self.one_shot_windows.is_empty(), "one-shot mode needs at least one window");
            for &w in &self.one_shot_windows {
                check(w, "one-shot")?;
            }
        }
        if self.modes.contains(&Mode::Continual) {
            let c = self.continual;
            check(c.window, "continual")?;
            ensure!(
                c.delta_months >= 1 && c.window.len() % c.delta_months == 0,
                "continual window {} does not split into {}-month segments",
                c.window,
                c.delta_months
            );
        }
        check(self.baselines.one_shot.window, "baseline")?;
        if let Some(b) = self.baselines.continual {
            check(b.window, "continual baseline")?;
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    /// All runs implied by the config, baselines included.
    pub fn runs(&self) -> Vec<RunId> {
        let mut runs = Vec::new();
        if self.modes.contains(&Mode::OneShot) {
            for &w in &self.one_shot_windows {
                runs.extend(self.cells.iter().map(|&c| RunId::one_shot(w, c)));
            }
        }
        if self.modes.contains(&Mode::Continual) {
            runs.extend(
                self.cells
                    .iter()
                    .map(|&c| RunId::continual(self.continual.window, self.continual.delta_months, c)),
            );
        }
        let mut baselines = vec![self.baselines.one_shot.run()];
        if self.modes.contains(&Mode::Continual) {
            baselines.push(self.baselines.for_mode(Mode::Continual).run());
        }
        for b in baselines {
            if !runs.contains(&b) {
                runs.push(b);
            }
        }
        runs
    }
}

/// Identifies one training run (all periods of a continual run share an id).
#[derive(Debug, Clone, PartialEq)]
pub struct RunId {
    pub mode: Mode,
    pub window: MonthWindow,
    pub delta_months: Option<u32>,
    pub cell: Cell,
}

impl RunId {
    pub fn one_shot(window: MonthWindow, cell: Cell) -> Self {
        RunId {
            mode: Mode::OneShot,
            window,
            delta_months: None,
            cell,
        }
    }

    pub fn continual(window: MonthWindow, delta_months: u32, cell: Cell) -> Self {
        RunId {
            mode: Mode::Continual,
            window,
            delta_months: Some(delta_months),
            cell,
        }
    }

    /// Experiment group, e.g. `one_shot-m5-11` or `continual-m5-11-dt2`.
    pub fn group(&self) -> String {
        match self.delta_months {
            Some(d) => format!("{}-{}-dt{d}", self.mode, self.window),
            None => format!("{}-{}", self.mode, self.window),
        }
    }

    /// Path relative to a seed directory.
    pub fn rel_dir(&self) -> PathBuf {
        Path::new(&self.group()).join(self.cell.id())
    }

    /// Number of checkpoints the run produces.
    pub fn periods(&self) -> u32 {
        match self.delta_months {
            Some(d) => self.window.len() / d,
            None => 1,
        }
    }

    /// Period directories relative to `rel_dir`, `p1`.. for continual runs and
    /// `.` for one-shot runs.
    pub fn period_dirs(&self) -> Vec<PathBuf> {
        match self.mode {
            Mode::OneShot => vec![PathBuf::new()],
            Mode::Continual => (1..=self.periods()).map(|p| PathBuf::from(format!("p{p}"))).collect(),
        }
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.group(), self.cell.id())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
