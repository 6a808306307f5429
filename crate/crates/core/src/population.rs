//! Devices, utterances and time.
//!
//! A [`Population`] is the full federated dataset: one [`DeviceShard`] per
//! device, each holding that device's timestamped token sequences. Shards are
//! kept sorted by device id and a population is immutable once built, so it can
//! be shared freely between workers.
//!
//! Time is measured in whole days. Months are fixed at [`DAYS_PER_MONTH`] days
//! so month-based windows and segment lengths always fall on day boundaries.

use std::array;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const DAYS_PER_MONTH: u32 = 30;

/// Candidate next tokens per context in the shared transition table.
const BRANCHING: usize = 8;
/// Tokens in each device's private vocabulary.
const TOPIC_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl DeviceId {
    pub fn new(id: impl Into<String>) -> Self {
        DeviceId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DeviceId {
    fn from(s: &str) -> Self {
        DeviceId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub device_id: DeviceId,
    pub day: u32,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceShard {
    pub device_id: DeviceId,
    pub utterances: Vec<Utterance>,
}

impl DeviceShard {
    pub fn new(device_id: DeviceId) -> Self {
        DeviceShard {
            device_id,
            utterances: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Half-open day range `[start_day, end_day)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_day: u32,
    pub end_day: u32,
}

impl TimeWindow {
    pub fn new(start_day: u32, end_day: u32) -> Result<Self> {
        if start_day >= end_day {
            return Err(Error::InvalidWindow {
                start: start_day,
                end: end_day,
            });
        }
        Ok(TimeWindow { start_day, end_day })
    }

    /// Window covering months `[start_month, end_month)`, counted from zero.
    pub fn months(start_month: u32, end_month: u32) -> Result<Self> {
        TimeWindow::new(start_month * DAYS_PER_MONTH, end_month * DAYS_PER_MONTH)
    }

    pub fn len_days(&self) -> u32 {
        self.end_day - self.start_day
    }

    pub fn contains(&self, day: u32) -> bool {
        self.start_day <= day && day < self.end_day
    }

    pub fn overlaps(&self, other: &TimeWindow) -> bool {
        self.start_day < other.end_day && other.start_day < self.end_day
    }

    pub fn intersect(&self, other: &TimeWindow) -> Option<TimeWindow> {
        let start = self.start_day.max(other.start_day);
        let end = self.end_day.min(other.end_day);
        (start < end).then_some(TimeWindow {
            start_day: start,
            end_day: end,
        })
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start_day, self.end_day)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    vocab_size: u32,
    time_range: TimeWindow,
    shards: Vec<DeviceShard>,
}

impl Population {
    /// Builds a population, sorting shards by device id and checking every
    /// utterance against the vocabulary and time range.
    pub fn new(vocab_size: u32, time_range: TimeWindow, mut shards: Vec<DeviceShard>) -> Result<Self> {
        shards.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        for pair in shards.windows(2) {
            if pair[0].device_id == pair[1].device_id {
                return Err(Error::InvalidSpec(format!(
                    "duplicate device id {}",
                    pair[0].device_id
                )));
            }
        }
        for shard in &shards {
            for utt in &shard.utterances {
                if utt.device_id != shard.device_id {
                    return Err(Error::InvalidSpec(format!(
                        "utterance of {} stored in shard {}",
                        utt.device_id, shard.device_id
                    )));
                }
                check_utterance(utt, vocab_size, &time_range).map_err(Error::InvalidSpec)?;
            }
        }
        Ok(Population {
            vocab_size,
            time_range,
            shards,
        })
    }

    /// A population with no devices, as produced by loading an empty file.
    pub fn empty() -> Self {
        Population {
            vocab_size: 0,
            time_range: TimeWindow {
                start_day: 0,
                end_day: 1,
            },
            shards: Vec::new(),
        }
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn time_range(&self) -> TimeWindow {
        self.time_range
    }

    pub fn shards(&self) -> &[DeviceShard] {
        &self.shards
    }

    pub fn num_devices(&self) -> usize {
        self.shards.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.shards.iter().map(DeviceShard::len).sum()
    }

    pub fn shard(&self, id: &DeviceId) -> Option<&DeviceShard> {
        self.shards
            .binary_search_by(|s| s.device_id.cmp(id))
            .ok()
            .map(|i| &self.shards[i])
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.shards.iter().flat_map(|s| s.utterances.iter())
    }
}

fn check_utterance(utt: &Utterance, vocab_size: u32, range: &TimeWindow) -> Result<(), String> {
    if utt.tokens.is_empty() {
        return Err("utterance has no tokens".into());
    }
    if let Some(&bad) = utt.tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(format!("token id {bad} >= vocab_size {vocab_size}"));
    }
    if !range.contains(utt.day) {
        return Err(format!("day {} outside time range {range}", utt.day));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityDistribution {
    pub zipf_exponent: f64,
    pub min_count: u64,
    pub max_count: u64,
}

/// Parameters of the synthetic population generator.
///
/// Per-device utterance counts follow a Zipf law truncated to
/// `[min_count, max_count]`, sampled by stratified quantiles. Tokens are drawn from a mixture of a device-local
/// categorical (weight `non_iid_mixing`) and a shared bigram transition table.
/// With probability `1 - novelty_rate` an utterance repeats an earlier one,
/// either from the same device (`self_repeat_share`) or from anyone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub device_count: usize,
    pub vocab_size: u32,
    pub months: u32,
    pub activity: ActivityDistribution,
    pub non_iid_mixing: f64,
    pub novelty_rate: f64,
    pub seed: u64,
    #[serde(default = "default_max_utterance_len")]
    pub max_utterance_len: usize,
    #[serde(default = "default_self_repeat_share")]
    pub self_repeat_share: f64,
}

fn default_max_utterance_len() -> usize {
    5
}

fn default_self_repeat_share() -> f64 {
    0.5
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            device_count: 1_000,
            vocab_size: 200,
            months: 12,
            activity: ActivityDistribution {
                zipf_exponent: 1.8,
                min_count: 1,
                max_count: 2_000,
            },
            non_iid_mixing: 0.6,
            novelty_rate: 0.3,
            seed: 0,
            max_utterance_len: default_max_utterance_len(),
            self_repeat_share: default_self_repeat_share(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.device_count == 0 {
            return fail("device_count must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.months == 0 {
            return fail("months must be at least 1".into());
        }
        let a = &self.activity;
        if a.min_count > a.max_count {
            return fail(format!(
                "min_count {} exceeds max_count {}",
                a.min_count, a.max_count
            ));
        }
        if !(a.zipf_exponent.is_finite() && a.zipf_exponent >= 0.0) {
            return fail(format!("zipf_exponent must be >= 0, got {}", a.zipf_exponent));
        }
        for (name, v) in [
            ("non_iid_mixing", self.non_iid_mixing),
            ("novelty_rate", self.novelty_rate),
            ("self_repeat_share", self.self_repeat_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.max_utterance_len == 0 {
            return fail("max_utterance_len must be at least 1".into());
        }
        Ok(())
    }

    pub fn time_range(&self) -> TimeWindow {
        TimeWindow {
            start_day: 0,
            end_day: self.months * DAYS_PER_MONTH,
        }
    }
}

/// Generates a synthetic population. Deterministic in `spec` (seed included).
pub fn generate_population(spec: &DatasetSpec) -> Result<Population> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = spec.vocab_size;
    let m = spec.device_count;

    // Successor ranks and topic ranks share one Zipf(1) profile.
    let rank_dist = WeightedIndex::new((1..=BRANCHING).map(|r| 1.0 / r as f64))
        .expect("positive rank weights");
    let chain: Vec<[u32; BRANCHING]> = (0..=vocab)
        .map(|_| array::from_fn(|_| rng.gen_range(0..vocab)))
        .collect();

    let span = spec.activity.max_count - spec.activity.min_count + 1;
    let s = spec.activity.zipf_exponent;
    let mut cdf: Vec<f64> = (1..=span).map(|r| (r as f64).powf(-s)).collect();
    let mut acc = 0.0;
    for c in cdf.iter_mut() {
        acc += *c;
        *c = acc;
    }
    if !(acc.is_finite() && acc > 0.0) {
        return Err(Error::InvalidSpec("activity distribution has no mass".into()));
    }
    // Stratified draws: each device gets its own 1/M slice of the quantile
    // range, so every population spans the whole activity law.
    let mut strata: Vec<usize> = (0..m).collect();
    strata.shuffle(&mut rng);

    let days = spec.months * DAYS_PER_MONTH;
    let mut topics: Vec<[u32; TOPIC_SIZE]> = Vec::with_capacity(m);
    let mut slots: Vec<(u32, usize)> = Vec::new();
    for device in 0..m {
        let u = (strata[device] as f64 + rng.gen::<f64>()) / m as f64 * acc;
        let rank = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
        let count = spec.activity.min_count + rank as u64;
        topics.push(array::from_fn(|_| rng.gen_range(0..vocab)));
        slots.extend((0..count).map(|_| (rng.gen_range(0..days), device)));
    }
    slots.sort_unstable();

    let mut texts: Vec<Vec<u32>> = Vec::with_capacity(slots.len());
    let mut history: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut placed: Vec<(u32, usize, usize)> = Vec::with_capacity(slots.len());
    for &(day, device) in &slots {
        let fresh = texts.is_empty() || rng.gen::<f64>() < spec.novelty_rate;
        let idx = if fresh {
            let len = rng.gen_range(1..=spec.max_utterance_len);
            let mut tokens = Vec::with_capacity(len);
            let mut prev = vocab as usize;
            for _ in 0..len {
                let rank = rank_dist.sample(&mut rng);
                let tok = if rng.gen::<f64>() < spec.non_iid_mixing {
                    topics[device][rank]
                } else {
                    chain[prev][rank]
                };
                tokens.push(tok);
                prev = tok as usize;
            }
            texts.push(tokens);
            texts.len() - 1
        } else {
            let own = &history[device];
            if !own.is_empty() && rng.gen::<f64>() < spec.self_repeat_share {
                own[rng.gen_range(0..own.len())]
            } else {
                placed[rng.gen_range(0..placed.len())].2
            }
        };
        history[device].push(idx);
        placed.push((day, device, idx));
    }

    let width = (m - 1).to_string().len().max(4);
    let ids: Vec<DeviceId> = (0..m).map(|i| DeviceId(format!("d{i:0width$}"))).collect();
    let mut shards: Vec<DeviceShard> = ids.iter().cloned().map(DeviceShard::new).collect();
    for (day, device, idx) in placed {
        shards[device].utterances.push(Utterance {
            device_id: ids[device].clone(),
            day,
            tokens: texts[idx].clone(),
        });
    }
    Population::new(vocab, spec.time_range(), shards)
}

/// Keeps only utterances whose day falls inside `window`. Devices left without
/// data keep an empty shard.
pub fn restrict_to_window(pop: &Population, window: TimeWindow) -> Result<Population> {
    let range = pop
        .time_range
        .intersect(&window)
        .ok_or(Error::DisjointWindow {
            start: window.start_day,
            end: window.end_day,
            range_start: pop.time_range.start_day,
            range_end: pop.time_range.end_day,
        })?;
    let shards = pop
        .shards
        .iter()
        .map(|s| DeviceShard {
            device_id: s.device_id.clone(),
            utterances: s
                .utterances
                .iter()
                .filter(|u| window.contains(u.day))
                .cloned()
                .collect(),
        })
        .collect();
    Ok(Population {
        vocab_size: pop.vocab_size,
        time_range: range,
        shards,
    })
}

/// Windows of `delta_months` tiling `window`, in chronological order.
pub fn segment_windows(window: TimeWindow, delta_months: u32) -> Result<Vec<TimeWindow>> {
    let seg_days = delta_months * DAYS_PER_MONTH;
    let days = window.len_days();
    if seg_days == 0 || days % seg_days != 0 {
        return Err(Error::Segmentation { days, delta_months });
    }
    Ok((0..days / seg_days)
        .map(|i| TimeWindow {
            start_day: window.start_day + i * seg_days,
            end_day: window.start_day + (i + 1) * seg_days,
        })
        .collect())
}

/// Splits `train_window` into consecutive `delta_months` segments and
/// restricts the population to each.
pub fn segment_periods(
    pop: &Population,
    train_window: TimeWindow,
    delta_months: u32,
) -> Result<Vec<Population>> {
    segment_windows(train_window, delta_months)?
        .into_iter()
        .map(|w| restrict_to_window(pop, w))
        .collect()
}

pub fn device_counts(pop: &Population) -> BTreeMap<DeviceId, u64> {
    pop.shards
        .iter()
        .map(|s| (s.device_id.clone(), s.len() as u64))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab_size: u32,
    start_day: u32,
    end_day: u32,
    /// Lists every device so that empty shards survive a round trip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    devices: Option<Vec<DeviceId>>,
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    device: std::borrow::Cow<'a, str>,
    day: u32,
    tokens: std::borrow::Cow<'a, [u32]>,
}

/// Writes the JSON-lines dataset format: a header on line 0, then one
/// utterance per line.
pub fn write_population<W: Write>(pop: &Population, mut out: W) -> Result<()> {
    let header = Header {
        vocab_size: pop.vocab_size,
        start_day: pop.time_range.start_day,
        end_day: pop.time_range.end_day,
        devices: Some(pop.shards.iter().map(|s| s.device_id.clone()).collect()),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for utt in pop.utterances() {
        let rec = Record {
            device: utt.device_id.as_str().into(),
            day: utt.day,
            tokens: utt.tokens.as_slice().into(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_population(pop: &Population, path: &Path) -> Result<()> {
    atomic_write(path, |w| write_population(pop, BufWriter::new(w)))
}

/// Parses the JSON-lines dataset format. Line numbers in errors count the
/// header as line 0.
pub fn read_population<R: BufRead>(input: R) -> Result<Population> {
    let mut lines = input.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => {
                log::warn!("dataset is empty; loaded a population with 0 devices");
                return Ok(Population::empty());
            }
            Some((n, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: n,
                    message: e.to_string(),
                })?;
            }
        }
    };
    let range = TimeWindow::new(header.start_day, header.end_day).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;

    let mut shards: BTreeMap<DeviceId, DeviceShard> = header
        .devices
        .unwrap_or_default()
        .into_iter()
        .map(|id| (id.clone(), DeviceShard::new(id)))
        .collect();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n,
            message: e.to_string(),
        })?;
        let utt = Utterance {
            device_id: DeviceId(rec.device.into_owned()),
            day: rec.day,
            tokens: rec.tokens.into_owned(),
        };
        check_utterance(&utt, header.vocab_size, &range)
            .map_err(|message| Error::Parse { line: n, message })?;
        shards
            .entry(utt.device_id.clone())
            .or_insert_with(|| DeviceShard::new(utt.device_id.clone()))
            .utterances
            .push(utt);
    }
    if shards.is_empty() {
        log::warn!("dataset has no devices");
    }
    Population::new(header.vocab_size, range, shards.into_values().collect())
}

pub fn load_population(path: &Path) -> Result<Population> {
    read_population(BufReader::new(File::open(path)?))
}

/// Number of distinct token sequences across the population.
pub fn distinct_utterances(pop: &Population) -> usize {
    pop.utterances()
        .map(|u| u.tokens.as_slice())
        .collect::<BTreeSet<_>>()
        .len()
}
