//! Activity-based device selection.
//!
//! Each strategy maps a device's utterance count `n` to a non-negative weight
//! `f(n)`; devices are then drawn into a round's cohort with probability
//! proportional to that weight, without replacement.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::population::DeviceId;

pub const DEFAULT_QUANTILE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionStrategy {
    /// `f(n) = 1`
    Uniform,
    /// `f(n) = ln(n + 1)`
    LogPlusOne,
    /// `f(n) = sqrt(n)`
    Sqrt,
    /// `f(n) = n`
    Linear,
    /// `f(n) = 1 / ln(n + 1)`, and 0 for empty devices.
    InvLogPlusOne,
    /// 1 for the most active `quantile` of devices, 0 otherwise.
    HeavyTop { quantile: f64 },
    /// 1 for the least active `quantile` of devices, 0 otherwise.
    LightBottom { quantile: f64 },
}

impl SelectionStrategy {
    pub const ALL_NAMES: [&'static str; 7] =
        ["uniform", "log", "sqrt", "linear", "invlog", "heavy", "light"];

    /// The seven strategies with default quantiles.
    pub fn all() -> [SelectionStrategy; 7] {
        [
            SelectionStrategy::Uniform,
            SelectionStrategy::LogPlusOne,
            SelectionStrategy::Sqrt,
            SelectionStrategy::Linear,
            SelectionStrategy::InvLogPlusOne,
            SelectionStrategy::HeavyTop {
                quantile: DEFAULT_QUANTILE,
            },
            SelectionStrategy::LightBottom {
                quantile: DEFAULT_QUANTILE,
            },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Uniform => "uniform",
            SelectionStrategy::LogPlusOne => "log",
            SelectionStrategy::Sqrt => "sqrt",
            SelectionStrategy::Linear => "linear",
            SelectionStrategy::InvLogPlusOne => "invlog",
            SelectionStrategy::HeavyTop { .. } => "heavy",
            SelectionStrategy::LightBottom { .. } => "light",
        }
    }

    pub fn quantile(&self) -> Option<f64> {
        match *self {
            SelectionStrategy::HeavyTop { quantile } | SelectionStrategy::LightBottom { quantile } => {
                Some(quantile)
            }
            _ => None,
        }
    }

    fn needs_rank(&self) -> bool {
        self.quantile().is_some()
    }

    pub fn validate(&self) -> Result<()> {
        match self.quantile() {
            Some(q) if !(q > 0.0 && q <= 1.0) => Err(Error::InvalidStrategy(format!(
                "quantile must lie in (0, 1], got {q}"
            ))),
            _ => Ok(()),
        }
    }

    /// Selection weight of a device with `count` utterances.
    ///
    /// `rank` is required for the heavy and light filters and ignored otherwise.
    pub fn weight(&self, count: u64, rank: Option<Rank>) -> Result<f64> {
        self.validate()?;
        let n = count as f64;
        let w = match *self {
            SelectionStrategy::Uniform => 1.0,
            SelectionStrategy::LogPlusOne => n.ln_1p(),
            SelectionStrategy::Sqrt => n.sqrt(),
            SelectionStrategy::Linear => n,
            SelectionStrategy::InvLogPlusOne => {
                if count == 0 {
                    0.0
                } else {
                    1.0 / n.ln_1p()
                }
            }
            SelectionStrategy::HeavyTop { quantile } => {
                let rank = rank.ok_or_else(|| missing_rank(self))?;
                indicator(rank.position < quantile_size(quantile, rank.of))
            }
            SelectionStrategy::LightBottom { quantile } => {
                let rank = rank.ok_or_else(|| missing_rank(self))?;
                indicator(rank.position >= rank.of - quantile_size(quantile, rank.of).min(rank.of))
            }
        };
        Ok(w)
    }
}

fn missing_rank(s: &SelectionStrategy) -> Error {
    Error::InvalidStrategy(format!("{} needs the device's activity rank", s.name()))
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Number of devices in a `quantile` fraction of `total`, rounded up.
pub fn quantile_size(quantile: f64, total: usize) -> usize {
    // 0.2 * 15 is 3.0000000000000004 in binary floating point.
    ((quantile * total as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Position of a device in the activity ranking, 0 being the most active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rank {
    pub position: usize,
    pub of: usize,
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.quantile() {
            Some(q) if q != DEFAULT_QUANTILE => write!(f, "{}-q{}", self.name(), q),
            _ => f.write_str(self.name()),
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    /// Accepts a bare name or `heavy:<quantile>` / `light:<quantile>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, quantile) = match s.split_once(':') {
            Some((n, q)) => {
                let q = q
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidStrategy(format!("quantile {q:?}: {e}")))?;
                (n, Some(q))
            }
            None => (s, None),
        };
        from_parts(name, quantile)
    }
}

fn from_parts(name: &str, quantile: Option<f64>) -> Result<SelectionStrategy> {
    let q = quantile.unwrap_or(DEFAULT_QUANTILE);
    let strategy = match name {
        "uniform" => SelectionStrategy::Uniform,
        "log" => SelectionStrategy::LogPlusOne,
        "sqrt" => SelectionStrategy::Sqrt,
        "linear" => SelectionStrategy::Linear,
        "invlog" => SelectionStrategy::InvLogPlusOne,
        "heavy" => SelectionStrategy::HeavyTop { quantile: q },
        "light" => SelectionStrategy::LightBottom { quantile: q },
        other => return Err(Error::InvalidStrategy(format!("unknown strategy {other:?}"))),
    };
    if quantile.is_some() && !strategy.needs_rank() {
        return Err(Error::InvalidStrategy(format!(
            "strategy {name:?} does not take a quantile"
        )));
    }
    strategy.validate()?;
    Ok(strategy)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StrategyRepr {
    Name(String),
    Full {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        quantile: Option<f64>,
    },
}

impl Serialize for SelectionStrategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let repr = match self.quantile() {
            Some(q) if q != DEFAULT_QUANTILE => StrategyRepr::Full {
                name: self.name().to_owned(),
                quantile: Some(q),
            },
            _ => StrategyRepr::Name(self.name().to_owned()),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SelectionStrategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let parsed = match StrategyRepr::deserialize(deserializer)? {
            StrategyRepr::Name(name) => name.parse(),
            StrategyRepr::Full { name, quantile } => from_parts(&name, quantile),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Selection weight for every device, in the map's (device id) order.
///
/// Heavy and light filters rank only devices holding data, ordered by count
/// descending then device id ascending; empty devices get weight 0.
pub fn strategy_weights(
    strategy: SelectionStrategy,
    counts: &BTreeMap<DeviceId, u64>,
) -> Result<Vec<(DeviceId, f64)>> {
    strategy.validate()?;
    let mut ranks: BTreeMap<&DeviceId, Rank> = BTreeMap::new();
    if strategy.needs_rank() {
        let mut active: Vec<(&DeviceId, u64)> =
            counts.iter().filter(|(_, &c)| c > 0).map(|(d, &c)| (d, c)).collect();
        active.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let of = active.len();
        ranks = active
            .into_iter()
            .enumerate()
            .map(|(position, (d, _))| (d, Rank { position, of }))
            .collect();
    }
    counts
        .iter()
        .map(|(device, &count)| {
            let w = if strategy.needs_rank() {
                match ranks.get(device) {
                    Some(&r) => strategy.weight(count, Some(r))?,
                    None => 0.0,
                }
            } else {
                strategy.weight(count, None)?
            };
            Ok((device.clone(), w))
        })
        .collect()
}

/// Normalised selection distribution over a fixed device list.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDistribution {
    devices: Vec<DeviceId>,
    probabilities: Vec<f64>,
}

impl SelectionDistribution {
    /// Normalises raw weights. Fails when no weight is positive.
    pub fn from_weights(weights: Vec<(DeviceId, f64)>) -> Result<Self> {
        if let Some((d, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidStrategy(format!("weight {w} for device {d}")));
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::NoEligibleDevices);
        }
        let (devices, probabilities) = weights.into_iter().map(|(d, w)| (d, w / total)).unzip();
        Ok(SelectionDistribution {
            devices,
            probabilities,
        })
    }

    pub fn devices(&self) -> &[DeviceId] {
        &self.devices
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn probability(&self, device: &DeviceId) -> Option<f64> {
        self.devices
            .iter()
            .position(|d| d == device)
            .map(|i| self.probabilities[i])
    }

    pub fn eligible(&self) -> usize {
        self.probabilities.iter().filter(|&&p| p > 0.0).count()
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

/// `P[m in S_t] ∝ f(n_m)`, normalised to sum to one.
pub fn selection_probabilities(
    strategy: SelectionStrategy,
    counts: &BTreeMap<DeviceId, u64>,
) -> Result<SelectionDistribution> {
    SelectionDistribution::from_weights(strategy_weights(strategy, counts)?)
}

/// The devices chosen for one round, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortPlan {
    pub devices: Vec<DeviceId>,
    /// Selection probability of each chosen device, aligned with `devices`.
    pub weights: Vec<f64>,
}

impl CohortPlan {
    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

/// Draws `k` distinct devices by exponential keys: each eligible device gets
/// `-ln(U) / p` and the `k` smallest keys win. For `k = 1` this picks device
/// `m` with probability exactly `p_m`. Keys are computed in log space so tiny
/// probabilities do not underflow.
pub fn select_cohort<R: Rng + ?Sized>(
    dist: &SelectionDistribution,
    k: usize,
    rng: &mut R,
) -> Result<CohortPlan> {
    if k == 0 {
        return Err(Error::InvalidConfig("cohort size must be at least 1".into()));
    }
    let mut keyed: Vec<(f64, usize)> = dist
        .probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| {
            let u = 1.0 - rng.gen::<f64>();
            (-u.ln() / p, i)
        })
        .collect();
    if keyed.is_empty() {
        return Err(Error::NoEligibleDevices);
    }
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, by_key);
        keyed.truncate(k);
    }
    let mut chosen: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(CohortPlan {
        devices: chosen.iter().map(|&i| dist.devices[i].clone()).collect(),
        weights: chosen.iter().map(|&i| dist.probabilities[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counts(values: &[u64]) -> BTreeMap<DeviceId, u64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &c)| (DeviceId(format!("d{i:02}")), c))
            .collect()
    }

    #[test]
    fn log_of_empty_device_is_zero() {
        assert_eq!(SelectionStrategy::LogPlusOne.weight(0, None).unwrap(), 0.0);
        assert_eq!(SelectionStrategy::InvLogPlusOne.weight(0, None).unwrap(), 0.0);
        assert_eq!(SelectionStrategy::Sqrt.weight(9, None).unwrap(), 3.0);
        assert_eq!(SelectionStrategy::Uniform.weight(0, None).unwrap(), 1.0);
    }

    #[test]
    fn linear_probabilities_normalise_counts() {
        let dist = selection_probabilities(SelectionStrategy::Linear, &counts(&[1, 2, 3])).unwrap();
        let expected = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (p, e) in dist.probabilities().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn inverse_log_closed_form() {
        let e = std::f64::consts::E;
        let w1 = SelectionStrategy::InvLogPlusOne.weight(0, None).unwrap();
        assert_eq!(w1, 0.0);
        // counts e-1 and e^2-1 are not integers; evaluate f directly on them
        let f = |x: f64| 1.0 / (x + 1.0).ln();
        let (a, b) = (f(e - 1.0), f(e * e - 1.0));
        assert!((a - 1.0).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
        let dist = SelectionDistribution::from_weights(vec![("a".into(), a), ("b".into(), b)]).unwrap();
        assert!((dist.probabilities()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((dist.probabilities()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn heavy_top_twenty_percent_of_ten() {
        let heavy = SelectionStrategy::HeavyTop { quantile: 0.2 };
        let at = |position| heavy.weight(100, Some(Rank { position, of: 10 })).unwrap();
        // ranks are 0-based: 1st and 2nd most active are in, 3rd onward are out
        assert_eq!(at(0), 1.0);
        assert_eq!(at(1), 1.0);
        assert_eq!(at(2), 0.0);
        assert_eq!(at(4), 0.0);
        assert!(heavy.weight(100, None).is_err());
    }

    #[test]
    fn light_filter_zeroes_active_devices() {
        let c = counts(&[50, 1, 30, 2, 40, 3, 20, 4, 10, 5]);
        let dist = selection_probabilities(SelectionStrategy::LightBottom { quantile: 0.2 }, &c).unwrap();
        let nonzero: Vec<&str> = dist
            .devices()
            .iter()
            .zip(dist.probabilities())
            .filter(|(_, &p)| p > 0.0)
            .map(|(d, _)| d.as_str())
            .collect();
        assert_eq!(nonzero, ["d01", "d03"]);
    }

    #[test]
    fn quantile_ties_break_by_device_id() {
        let c = counts(&[5, 5, 5, 5, 5]);
        let w = strategy_weights(SelectionStrategy::HeavyTop { quantile: 0.2 }, &c).unwrap();
        let chosen: Vec<_> = w.iter().filter(|(_, w)| *w > 0.0).map(|(d, _)| d.as_str()).collect();
        assert_eq!(chosen, ["d00"]);
        let w = strategy_weights(SelectionStrategy::LightBottom { quantile: 0.2 }, &c).unwrap();
        let chosen: Vec<_> = w.iter().filter(|(_, w)| *w > 0.0).map(|(d, _)| d.as_str()).collect();
        assert_eq!(chosen, ["d04"]);
    }

    #[test]
    fn quantile_size_tolerates_rounding() {
        assert_eq!(quantile_size(0.2, 10), 2);
        assert_eq!(quantile_size(0.2, 15), 3);
        assert_eq!(quantile_size(0.2, 11), 3);
        assert_eq!(quantile_size(1.0, 7), 7);
    }

    #[test]
    fn heavy_and_light_skip_empty_devices() {
        let c = counts(&[0, 0, 0, 4, 9]);
        let w = strategy_weights(SelectionStrategy::LightBottom { quantile: 0.5 }, &c).unwrap();
        assert_eq!(w.iter().map(|x| x.1).collect::<Vec<_>>(), [0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn all_zero_weights_is_an_error() {
        let err = selection_probabilities(SelectionStrategy::Linear, &counts(&[0, 0])).unwrap_err();
        assert!(matches!(err, Error::NoEligibleDevices));
        assert_eq!(err.to_string(), "no eligible devices");
    }

    #[test]
    fn uniform_is_flat() {
        let dist = selection_probabilities(SelectionStrategy::Uniform, &counts(&[1, 100, 0, 7])).unwrap();
        assert!(dist.probabilities().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn bad_quantiles_are_rejected() {
        assert!(SelectionStrategy::HeavyTop { quantile: 0.0 }.validate().is_err());
        assert!(SelectionStrategy::LightBottom { quantile: 1.5 }.validate().is_err());
        assert!("sqrt:0.1".parse::<SelectionStrategy>().is_err());
        assert!("bogus".parse::<SelectionStrategy>().is_err());
    }

    #[test]
    fn config_names_parse() {
        for name in SelectionStrategy::ALL_NAMES {
            let s: SelectionStrategy = name.parse().unwrap();
            assert_eq!(s.name(), name);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{name}\""));
        }
        let s: SelectionStrategy = serde_json::from_str(r#"{"name":"heavy","quantile":0.1}"#).unwrap();
        assert_eq!(s, SelectionStrategy::HeavyTop { quantile: 0.1 });
        assert_eq!(s.to_string(), "heavy-q0.1");
        let back: SelectionStrategy = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn cohort_exhausts_small_populations() {
        let dist = selection_probabilities(SelectionStrategy::Uniform, &counts(&[1, 2, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = select_cohort(&dist, 10, &mut rng).unwrap();
        assert_eq!(plan.len(), 3);
    }

    #[test]
    fn cohort_only_holds_eligible_devices() {
        let dist = selection_probabilities(SelectionStrategy::Linear, &counts(&[0, 2, 0, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = select_cohort(&dist, 4, &mut rng).unwrap();
        assert_eq!(plan.devices, [DeviceId::from("d01"), DeviceId::from("d03")]);
    }

    #[test]
    fn cohort_is_deterministic_per_seed() {
        let c = counts(&(1..=100).collect::<Vec<_>>());
        let dist = selection_probabilities(SelectionStrategy::Sqrt, &c).unwrap();
        let a = select_cohort(&dist, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = select_cohort(&dist, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.devices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_cohort_size_is_rejected() {
        let dist = selection_probabilities(SelectionStrategy::Uniform, &counts(&[1])).unwrap();
        assert!(select_cohort(&dist, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn tiny_probabilities_still_sampled() {
        // one dominant device and many tiny ones; with k=2 the second slot
        // must still spread across the tiny devices
        let mut c: Vec<u64> = vec![1; 2000];
        c[0] = 100_000_000;
        let dist = selection_probabilities(SelectionStrategy::Linear, &counts(&c)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..50 {
            let plan = select_cohort(&dist, 2, &mut rng).unwrap();
            seen.insert(plan.devices[1].clone());
        }
        assert!(seen.len() > 40, "second slot collapsed onto {} devices", seen.len());
    }

    proptest! {
        #[test]
        fn probabilities_are_scale_invariant(
            raw in proptest::collection::vec(0.0f64..1e3, 1..40),
            scale in 1e-3f64..1e3,
        ) {
            prop_assume!(raw.iter().any(|&w| w > 0.0));
            let named = |s: f64| raw.iter().enumerate()
                .map(|(i, &w)| (DeviceId(format!("{i}")), w * s))
                .collect::<Vec<_>>();
            let a = SelectionDistribution::from_weights(named(1.0)).unwrap();
            let b = SelectionDistribution::from_weights(named(scale)).unwrap();
            let total: f64 = a.probabilities().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (p, q) in a.probabilities().iter().zip(b.probabilities()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn monotone_strategies_respect_activity_order(a in 0u64..1_000_000, b in 0u64..1_000_000) {
            prop_assume!(a > b);
            for s in [SelectionStrategy::LogPlusOne, SelectionStrategy::Sqrt, SelectionStrategy::Linear] {
                prop_assert!(s.weight(a, None).unwrap() >= s.weight(b, None).unwrap());
            }
            if b >= 1 {
                let inv = SelectionStrategy::InvLogPlusOne;
                prop_assert!(inv.weight(a, None).unwrap() <= inv.weight(b, None).unwrap());
            }
        }

        #[test]
        fn heavy_and_complementary_light_cover_everyone(
            raw in proptest::collection::vec(1u64..50, 1..60),
            q in 0.05f64..0.95,
        ) {
            let c = counts(&raw);
            let heavy = strategy_weights(SelectionStrategy::HeavyTop { quantile: q }, &c).unwrap();
            let light = strategy_weights(SelectionStrategy::LightBottom { quantile: 1.0 - q }, &c).unwrap();
            for ((_, h), (_, l)) in heavy.iter().zip(&light) {
                prop_assert!(*h > 0.0 || *l > 0.0);
            }
        }
    }
}
