//! The `gen` step and dataset loading for later steps.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedsim_core::io::atomic_write;
use fedsim_core::population::{load_population, save_population};
use fedsim_core::{generate_population, DatasetSpec, Population};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, DatasetSource, ExperimentConfig};
use crate::layout::Layout;

/// Printed by `gen` for every replication seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub seed: u64,
    pub path: PathBuf,
    pub devices: usize,
    pub active_devices: usize,
    pub utterances: usize,
    /// max(n_m) / min(n_m) over devices with data.
    pub activity_ratio: f64,
}

impl DatasetSummary {
    pub fn of(seed: u64, path: PathBuf, pop: &Population) -> Self {
        let counts: Vec<usize> = pop.shards().iter().map(|s| s.len()).filter(|&n| n > 0).collect();
        let max = counts.iter().copied().max().unwrap_or(0);
        let min = counts.iter().copied().min().unwrap_or(0);
        DatasetSummary {
            seed,
            path,
            devices: pop.num_devices(),
            active_devices: counts.len(),
            utterances: pop.num_utterances(),
            activity_ratio: if min == 0 { 0.0 } else { max as f64 / min as f64 },
        }
    }
}

/// A loaded dataset plus what manifests need to identify it.
pub struct Dataset {
    pub population: Population,
    /// Path as recorded in manifests (relative to the output root when generated).
    pub recorded_path: String,
    pub sha256: String,
}

pub fn spec_for_seed(spec: &DatasetSpec, seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed: spec.seed.wrapping_add(seed),
        ..spec.clone()
    }
}

/// Writes the resolved config next to the outputs.
pub fn write_config(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    write_bytes(&layout.config(), text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, |f| {
        f.write_all(bytes)?;
        Ok(())
    })
    .with_context(|| format!("writing {}", path.display()))
}

pub fn gen(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<Vec<DatasetSummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    match &cfg.dataset {
        DatasetSource::Generate(spec) => {
            for &seed in &cfg.seeds {
                let path = layout.dataset(seed);
                if path.exists() && !force {
                    bail!("{} already exists (use --force to overwrite)", path.display());
                }
            }
            for &seed in &cfg.seeds {
                let pop = generate_population(&spec_for_seed(spec, seed))
                    .with_context(|| format!("generating dataset for seed {seed}"))?;
                let path = layout.dataset(seed);
                save_population(&pop, &path).with_context(|| format!("writing {}", path.display()))?;
                out.push(DatasetSummary::of(seed, path, &pop));
            }
        }
        DatasetSource::Path(path) => {
            let pop = load_population(path).with_context(|| format!("loading {}", path.display()))?;
            for &seed in &cfg.seeds {
                out.push(DatasetSummary::of(seed, path.clone(), &pop));
            }
        }
    }
    write_config(cfg, layout)?;
    Ok(out)
}

pub fn load_dataset(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<Dataset> {
    let (path, recorded) = match &cfg.dataset {
        DatasetSource::Generate(_) => {
            let path = layout.dataset(seed);
            if !path.exists() {
                bail!("dataset for seed {seed} not found at {} (run `fedsim gen` first)", path.display());
            }
            (path, Layout::dataset_rel(seed))
        }
        DatasetSource::Path(path) => (path.clone(), path.clone()),
    };
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let population = load_population(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Dataset {
        population,
        recorded_path: recorded.to_string_lossy().replace('\\', "/"),
        sha256: hex(&Sha256::digest(&bytes)),
    })
}
