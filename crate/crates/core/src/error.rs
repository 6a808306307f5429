use thiserror::Error;

use crate::population::DeviceId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("time window [{start}, {end}) is invalid")]
    InvalidWindow { start: u32, end: u32 },

    #[error("time window [{start}, {end}) does not overlap population range [{range_start}, {range_end})")]
    DisjointWindow {
        start: u32,
        end: u32,
        range_start: u32,
        range_end: u32,
    },

    #[error("window of {days} days cannot be split into segments of {delta_months} months")]
    Segmentation { days: u32, delta_months: u32 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid selection strategy: {0}")]
    InvalidStrategy(String),

    #[error("no eligible devices")]
    NoEligibleDevices,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite parameter at index {0}")]
    NonFiniteParams(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("device {0} has no utterances")]
    EmptyShard(DeviceId),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("no local updates to aggregate")]
    NoUpdates,

    #[error("invalid round config: {0}")]
    InvalidConfig(String),

    #[error("need at least {needed} devices with test utterances, found {found}")]
    TooFewDevices { needed: usize, found: usize },

    #[error("innovation needs at least 2 periods, got {0}")]
    TooFewPeriods(usize),

    #[error("baseline perplexity must be positive, got {0}")]
    InvalidBaseline(f64),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}
