//! Where each artifact lives under the output directory.

use std::path::{Path, PathBuf};

use crate::config::RunId;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const MANIFEST: &str = "manifest.json";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const DECILE_REPORT: &str = "decile_report.csv";
pub const SUMMARY: &str = "summary.csv";
pub const INNOVATION: &str = "innovation.csv";

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    /// Dataset path relative to the root, as recorded in manifests.
    pub fn dataset_rel(seed: u64) -> PathBuf {
        Path::new("data").join(seed_dir(seed)).join("population.jsonl")
    }

    pub fn dataset(&self, seed: u64) -> PathBuf {
        self.root.join(Self::dataset_rel(seed))
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, seed: u64, run: &RunId) -> PathBuf {
        self.runs().join(seed_dir(seed)).join(run.rel_dir())
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn eval_seed(&self, seed: u64) -> PathBuf {
        self.eval().join(seed_dir(seed))
    }

    pub fn eval_dir(&self, seed: u64, run: &RunId) -> PathBuf {
        self.eval_seed(seed).join(run.rel_dir())
    }

    pub fn summary(&self) -> PathBuf {
        self.eval().join(SUMMARY)
    }

    pub fn innovation_summary(&self) -> PathBuf {
        self.eval().join(INNOVATION)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}
