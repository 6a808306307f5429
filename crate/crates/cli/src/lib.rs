//! Experiment driver for the `fedsim` binary: configuration and presets,
//! dataset generation, training of every (algorithm, strategy, seed) cell,
//! evaluation with RCP, and figure tables.

pub mod cli;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod layout;
pub mod report;
pub mod train;

pub use config::{Cell, ExperimentConfig, Mode, MonthWindow, Preset, RunId};
pub use layout::Layout;
