//! Federated learning simulation with activity-based device selection.
//!
//! The crate covers the full experimental loop:
//!
//! * [`population`]: synthetic heavy-tailed device populations, time windows
//!   and continual-learning segments.
//! * [`strategies`]: selection weights `f(n_m)` and cohort sampling.
//! * [`models`]: small next-token models with analytic gradients.
//! * [`engine`]: FedAvg and FedOpt rounds, one-shot and continual drivers.
//! * [`eval`]: pooled perplexity by activity decile, relative change in
//!   perplexity, and the innovation breakdown of utterances.

pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod population;
pub mod strategies;

pub use engine::{
    aggregate, fedavg_round, fedopt_round, local_update, run_continual, run_one_shot,
    ActivityScope, Algorithm, Federation, LocalUpdate, Moments, Provenance, RoundConfig,
    RoundDiagnostics, RunResult, ServerState,
};
pub use error::{Error, Result};
pub use eval::{decile_split, evaluate, innovation, rcp, DecileReport, InnovationReport, RcpReport};
pub use models::{init_params, ModelKind, ModelParams, ModelSpec};
pub use population::{
    device_counts, generate_population, restrict_to_window, segment_periods, DatasetSpec, DeviceId,
    DeviceShard, Population, TimeWindow, Utterance,
};
pub use strategies::{select_cohort, selection_probabilities, CohortPlan, SelectionStrategy};
