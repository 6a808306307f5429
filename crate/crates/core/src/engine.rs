//! The federated training loop.
//!
//! A round samples a cohort, runs local SGD on every selected device holding
//! data, and combines the results on the server:
//!
//! * FedAvg replaces the global model with the `n_m / N_t` weighted average of
//!   the local models.
//! * FedOpt treats `w_t - average` as a pseudo-gradient and takes an Adam-style
//!   step without bias correction.
//!
//! Local updates are independent and run on the ambient rayon pool. Each
//! device's random stream is derived from `(seed, stream, round, device_id)`
//! and the average is reduced in device-id order, so results do not depend on
//! the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{sgd_epoch_in_place, ModelParams};
use crate::population::{
    device_counts, restrict_to_window, segment_windows, DeviceId, DeviceShard, Population,
    TimeWindow,
};
use crate::strategies::{
    select_cohort, selection_probabilities, SelectionDistribution, SelectionStrategy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedopt")]
    FedOpt,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedOpt => "fedopt",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedopt" => Ok(Algorithm::FedOpt),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Which slice of time device counts are taken from in continual training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityScope {
    /// Counts within the segment being trained.
    #[default]
    Segment,
    /// Counts over the whole training window.
    TrainWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub cohort_size: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub local_batch_size: usize,
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adaptivity constant added to `sqrt(v)` in the FedOpt step.
    pub tau: f64,
    pub rounds: usize,
    pub seed: u64,
    /// Counts used to rank and weight devices for selection.
    #[serde(default)]
    pub selection_scope: ActivityScope,
    /// Counts used as `n_m` in the server average.
    #[serde(default)]
    pub aggregation_scope: ActivityScope,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            cohort_size: 50,
            local_epochs: 1,
            local_lr: 0.5,
            local_batch_size: 64,
            server_lr: 0.03,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            rounds: 200,
            seed: 0,
            selection_scope: ActivityScope::Segment,
            aggregation_scope: ActivityScope::Segment,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.cohort_size == 0 {
            return fail("cohort_size must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1".into());
        }
        if self.local_batch_size == 0 {
            return fail("local_batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("local_lr", self.local_lr),
            ("server_lr", self.server_lr),
            ("tau", self.tau),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        Ok(())
    }
}

/// Seed for one random stream, derived by hashing its coordinates.
pub fn derive_seed(seed: u64, stream: u64, round: u64, tag: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fedsim/v1");
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    h.update(round.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag);
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Seed of a device's local-training stream.
pub fn device_seed(seed: u64, stream: u64, round: u64, device: &DeviceId) -> u64 {
    let mut tag = Vec::with_capacity(device.as_str().len() + 1);
    tag.push(b'd');
    tag.extend_from_slice(device.as_str().as_bytes());
    derive_seed(seed, stream, round, &tag)
}

/// Seed of the cohort-sampling stream.
pub fn cohort_seed(seed: u64, stream: u64, round: u64) -> u64 {
    derive_seed(seed, stream, round, b"c")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub device_id: DeviceId,
    /// Aggregation weight `n_m`.
    pub count: u64,
    pub params: ModelParams,
    /// Mean minibatch loss over the first local epoch.
    pub mean_loss: f64,
}

/// Runs `local_epochs` SGD passes over the shard starting from `global`.
/// Returns `None` for an empty shard.
pub fn local_update(
    shard: &DeviceShard,
    global: &ModelParams,
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<LocalUpdate>> {
    if shard.is_empty() {
        return Ok(None);
    }
    let mut params = global.clone();
    let mut first_loss = None;
    for _ in 0..cfg.local_epochs {
        let stats = sgd_epoch_in_place(&mut params, &shard.utterances, cfg.local_lr, cfg.local_batch_size, rng)?;
        first_loss.get_or_insert(stats.mean_loss);
    }
    Ok(Some(LocalUpdate {
        device_id: shard.device_id.clone(),
        count: shard.len() as u64,
        params,
        mean_loss: first_loss.unwrap_or(f64::NAN),
    }))
}

/// `sum_m (n_m / N) w_m`, reduced in device-id order and clamped to the
/// coordinate-wise range of the inputs.
pub fn aggregate(updates: &[LocalUpdate]) -> Result<ModelParams> {
    let first = updates.first().ok_or(Error::NoUpdates)?;
    let spec = first.params.spec();
    if let Some(bad) = updates.iter().find(|u| u.params.spec() != spec) {
        return Err(Error::LayoutMismatch(format!(
            "device {} has {:?}, expected {:?}",
            bad.device_id,
            bad.params.spec(),
            spec
        )));
    }
    let total: u64 = updates.iter().map(|u| u.count).sum();
    if total == 0 {
        return Err(Error::NoUpdates);
    }
    let mut order: Vec<&LocalUpdate> = updates.iter().collect();
    order.sort_by(|a, b| a.device_id.cmp(&b.device_id));

    let len = first.params.len();
    let mut sum = vec![0.0; len];
    let mut lo = vec![f64::INFINITY; len];
    let mut hi = vec![f64::NEG_INFINITY; len];
    for u in order {
        let n = u.count as f64;
        for (((s, l), h), &w) in sum.iter_mut().zip(&mut lo).zip(&mut hi).zip(u.params.values()) {
            *s += n * w;
            *l = l.min(w);
            *h = h.max(w);
        }
    }
    let n_total = total as f64;
    let values = sum
        .into_iter()
        .zip(lo.iter().zip(&hi))
        .map(|(s, (&l, &h))| (s / n_total).clamp(l, h))
        .collect();
    ModelParams::from_values(spec, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub params: ModelParams,
    /// FedOpt first and second moments; `None` until the first FedOpt step.
    pub moments: Option<Moments>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl ServerState {
    pub fn new(params: ModelParams) -> Self {
        ServerState {
            round: 0,
            params,
            moments: None,
        }
    }

    /// Starts with zeroed FedOpt moments.
    pub fn with_moments(params: ModelParams) -> Self {
        let n = params.len();
        ServerState {
            round: 0,
            params,
            moments: Some(Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            }),
        }
    }
}

/// Per-round training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    /// Devices drawn into the cohort.
    pub cohort_selected: usize,
    /// Selected devices that held data and produced an update.
    pub cohort_trained: usize,
    /// `N_t`, the summed aggregation weight of the trained devices.
    pub total_count: u64,
    /// `n_m`-weighted mean of the devices' local training loss.
    pub mean_local_loss: Option<f64>,
    pub skipped: bool,
}

/// Everything a round needs to know about the data it trains on.
#[derive(Debug, Clone)]
pub struct Federation<'a> {
    population: &'a Population,
    selection: SelectionDistribution,
    aggregation_counts: Option<BTreeMap<DeviceId, u64>>,
    stream: u64,
}

impl<'a> Federation<'a> {
    /// Selection weights from the population's own device counts.
    pub fn new(population: &'a Population, strategy: SelectionStrategy) -> Result<Self> {
        let selection = selection_probabilities(strategy, &device_counts(population))?;
        Ok(Federation {
            population,
            selection,
            aggregation_counts: None,
            stream: 0,
        })
    }

    pub fn with_selection(population: &'a Population, selection: SelectionDistribution) -> Self {
        Federation {
            population,
            selection,
            aggregation_counts: None,
            stream: 0,
        }
    }

    /// Overrides `n_m` in the average; devices absent from the map fall back
    /// to their shard size.
    pub fn with_aggregation_counts(mut self, counts: BTreeMap<DeviceId, u64>) -> Self {
        self.aggregation_counts = Some(counts);
        self
    }

    /// Independent random stream, e.g. one per continual segment.
    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn population(&self) -> &Population {
        self.population
    }

    pub fn selection(&self) -> &SelectionDistribution {
        &self.selection
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

/// Samples a cohort and trains it. Returns the averaged local model (`None`
/// when every selected shard was empty) and the round's diagnostics.
fn train_cohort(
    state: &ServerState,
    fed: &Federation<'_>,
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<ModelParams>, RoundDiagnostics)> {
    cfg.validate()?;
    let cohort = select_cohort(&fed.selection, cfg.cohort_size, rng)?;
    let round = state.round as u64;
    let shards: Vec<&DeviceShard> = cohort
        .devices
        .iter()
        .map(|d| {
            fed.population
                .shard(d)
                .ok_or_else(|| Error::InvalidConfig(format!("device {d} not in population")))
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<Option<LocalUpdate>>> = shards
        .par_iter()
        .map(|shard| {
            let mut drng =
                ChaCha8Rng::seed_from_u64(device_seed(cfg.seed, fed.stream, round, &shard.device_id));
            local_update(shard, &state.params, cfg, &mut drng)
        })
        .collect();
    let mut updates = Vec::with_capacity(results.len());
    for r in results {
        if let Some(mut u) = r? {
            if let Some(c) = fed.aggregation_counts.as_ref().and_then(|m| m.get(&u.device_id)) {
                u.count = *c;
            }
            if u.count > 0 {
                updates.push(u);
            }
        }
    }

    let mut diag = RoundDiagnostics {
        round: state.round,
        cohort_selected: cohort.len(),
        cohort_trained: updates.len(),
        total_count: updates.iter().map(|u| u.count).sum(),
        mean_local_loss: None,
        skipped: updates.is_empty(),
    };
    if updates.is_empty() {
        log::warn!(
            "round {}: all {} selected devices are empty, skipping",
            state.round,
            cohort.len()
        );
        return Ok((None, diag));
    }
    let weighted: f64 = updates.iter().map(|u| u.count as f64 * u.mean_loss).sum();
    diag.mean_local_loss = Some(weighted / diag.total_count as f64);
    Ok((Some(aggregate(&updates)?), diag))
}

/// One FedAvg round: the new global model is the weighted average.
pub fn fedavg_round(
    state: &ServerState,
    fed: &Federation<'_>,
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ServerState, RoundDiagnostics)> {
    let (avg, diag) = train_cohort(state, fed, cfg, rng)?;
    let next = ServerState {
        round: state.round + 1,
        params: avg.unwrap_or_else(|| state.params.clone()),
        moments: state.moments.clone(),
    };
    Ok((next, diag))
}

/// Adam-style server step on the pseudo-gradient `delta = w_t - avg`:
/// `m = b1 m + (1-b1) delta`, `v = b2 v + (1-b2) delta^2`,
/// `w = w - lr m / (sqrt(v) + tau)`.
pub fn fedopt_step(
    params: &ModelParams,
    moments: &mut Moments,
    average: &ModelParams,
    cfg: &RoundConfig,
) -> Result<ModelParams> {
    if average.spec() != params.spec() || moments.first.len() != params.len() {
        return Err(Error::LayoutMismatch("server state and update disagree".into()));
    }
    let values = params
        .values()
        .iter()
        .zip(average.values())
        .zip(moments.first.iter_mut().zip(moments.second.iter_mut()))
        .map(|((&w, &a), (m, v))| {
            let delta = w - a;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * delta;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * delta * delta;
            if *m == 0.0 {
                w
            } else {
                w - cfg.server_lr * *m / (v.sqrt() + cfg.tau)
            }
        })
        .collect();
    ModelParams::from_values(params.spec(), values)
}

/// One FedOpt round. Moments start at zero when the state has none.
pub fn fedopt_round(
    state: &ServerState,
    fed: &Federation<'_>,
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ServerState, RoundDiagnostics)> {
    let (avg, diag) = train_cohort(state, fed, cfg, rng)?;
    let mut moments = state.moments.clone().unwrap_or_else(|| Moments {
        first: vec![0.0; state.params.len()],
        second: vec![0.0; state.params.len()],
    });
    let params = match avg {
        Some(avg) => fedopt_step(&state.params, &mut moments, &avg, cfg)?,
        None => state.params.clone(),
    };
    Ok((
        ServerState {
            round: state.round + 1,
            params,
            moments: Some(moments),
        },
        diag,
    ))
}

pub fn run_round(
    algorithm: Algorithm,
    state: &ServerState,
    fed: &Federation<'_>,
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ServerState, RoundDiagnostics)> {
    match algorithm {
        Algorithm::FedAvg => fedavg_round(state, fed, cfg, rng),
        Algorithm::FedOpt => fedopt_round(state, fed, cfg, rng),
    }
}

/// What a run trained on and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub algorithm: Algorithm,
    pub strategy: SelectionStrategy,
    pub window: TimeWindow,
    /// Index of the continual segment, `None` for one-shot runs.
    pub segment: Option<usize>,
    pub seed: u64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub initial_params: ModelParams,
    pub final_params: ModelParams,
    pub diagnostics: Vec<RoundDiagnostics>,
    pub provenance: Provenance,
}

fn train_rounds(
    algorithm: Algorithm,
    fed: &Federation<'_>,
    cfg: &RoundConfig,
    init: &ModelParams,
) -> Result<(ModelParams, Vec<RoundDiagnostics>)> {
    cfg.validate()?;
    let mut state = ServerState::new(init.clone());
    let mut diagnostics = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cohort_seed(cfg.seed, fed.stream, state.round as u64));
        let (next, diag) = run_round(algorithm, &state, fed, cfg, &mut rng)?;
        diagnostics.push(diag);
        state = next;
    }
    Ok((state.params, diagnostics))
}

/// Trains for `cfg.rounds` rounds on all data inside `train_window`.
pub fn run_one_shot(
    population: &Population,
    train_window: TimeWindow,
    strategy: SelectionStrategy,
    algorithm: Algorithm,
    cfg: &RoundConfig,
    init: &ModelParams,
) -> Result<RunResult> {
    let data = restrict_to_window(population, train_window)?;
    let fed = Federation::new(&data, strategy)?;
    let (final_params, diagnostics) = train_rounds(algorithm, &fed, cfg, init)?;
    Ok(RunResult {
        initial_params: init.clone(),
        final_params,
        diagnostics,
        provenance: Provenance {
            algorithm,
            strategy,
            window: data.time_range(),
            segment: None,
            seed: cfg.seed,
            rounds: cfg.rounds,
        },
    })
}

/// Trains on consecutive `delta_months` segments of `train_window`, each
/// starting from the previous segment's final model. The first segment uses
/// the same random streams as [`run_one_shot`], and FedOpt moments restart at
/// every segment.
pub fn run_continual(
    population: &Population,
    train_window: TimeWindow,
    delta_months: u32,
    strategy: SelectionStrategy,
    algorithm: Algorithm,
    cfg: &RoundConfig,
    init: &ModelParams,
) -> Result<Vec<RunResult>> {
    let windows = segment_windows(train_window, delta_months)?;
    let needs_window_counts = cfg.selection_scope == ActivityScope::TrainWindow
        || cfg.aggregation_scope == ActivityScope::TrainWindow;
    let window_counts = if needs_window_counts {
        Some(device_counts(&restrict_to_window(population, train_window)?))
    } else {
        None
    };

    let mut results: Vec<RunResult> = Vec::with_capacity(windows.len());
    let mut start = init.clone();
    for (i, window) in windows.into_iter().enumerate() {
        let data = restrict_to_window(population, window)?;
        let mut fed = match (cfg.selection_scope, &window_counts) {
            (ActivityScope::TrainWindow, Some(counts)) => {
                Federation::with_selection(&data, selection_probabilities(strategy, counts)?)
            }
            _ => Federation::new(&data, strategy)?,
        };
        if let (ActivityScope::TrainWindow, Some(counts)) = (cfg.aggregation_scope, &window_counts) {
            fed = fed.with_aggregation_counts(counts.clone());
        }
        let fed = fed.with_stream(i as u64);
        let (final_params, diagnostics) = train_rounds(algorithm, &fed, cfg, &start)?;
        results.push(RunResult {
            initial_params: start,
            final_params: final_params.clone(),
            diagnostics,
            provenance: Provenance {
                algorithm,
                strategy,
                window: data.time_range(),
                segment: Some(i),
                seed: cfg.seed,
                rounds: cfg.rounds,
            },
        });
        start = final_params;
    }
    Ok(results)
}
