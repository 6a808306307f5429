//! Evaluation by device activity.
//!
//! Test devices are sorted by how many test utterances they hold and cut into
//! ten near-equal deciles. Perplexity is pooled over all tokens of a decile,
//! and relative change in perplexity (RCP) is always taken against the
//! baseline model's perplexity on the whole test set.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{nll_totals, ModelParams};
use crate::population::{DeviceId, Population};

pub const DECILES: usize = 10;

/// Splits `sorted` into `groups` contiguous chunks whose sizes differ by at
/// most one.
fn chunk<T: Clone>(sorted: &[T], groups: usize) -> Vec<Vec<T>> {
    let m = sorted.len();
    (0..groups)
        .map(|i| sorted[i * m / groups..(i + 1) * m / groups].to_vec())
        .collect()
}

fn activity_deciles(counts: impl IntoIterator<Item = (DeviceId, u64)>) -> Result<Vec<Vec<DeviceId>>> {
    let mut active: Vec<(u64, DeviceId)> = counts
        .into_iter()
        .filter(|(_, c)| *c > 0)
        .map(|(d, c)| (c, d))
        .collect();
    if active.len() < DECILES {
        return Err(Error::TooFewDevices {
            needed: DECILES,
            found: active.len(),
        });
    }
    active.sort();
    let ids: Vec<DeviceId> = active.into_iter().map(|(_, d)| d).collect();
    Ok(chunk(&ids, DECILES))
}

/// Ten groups of test devices in ascending order of activity (ties by id).
/// Devices without test utterances are left out.
pub fn decile_split(test: &Population) -> Result<Vec<Vec<DeviceId>>> {
    activity_deciles(
        test.shards()
            .iter()
            .map(|s| (s.device_id.clone(), s.len() as u64)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub devices: usize,
    pub utterances: usize,
    /// Predicted tokens.
    pub tokens: usize,
    /// Summed negative log-likelihood in nats.
    pub nll: f64,
    pub perplexity: f64,
}

impl GroupStats {
    fn new(devices: usize, utterances: usize, nll: f64, tokens: usize) -> Self {
        GroupStats {
            devices,
            utterances,
            tokens,
            nll,
            perplexity: (nll / tokens as f64).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileReport {
    pub deciles: Vec<GroupStats>,
    pub overall: GroupStats,
}

/// Pooled perplexity per activity decile and over the whole test set.
pub fn evaluate(params: &ModelParams, test: &Population) -> Result<DecileReport> {
    let groups = decile_split(test)?;
    let deciles = groups
        .par_iter()
        .map(|ids| {
            let shards: Vec<_> = ids.iter().filter_map(|d| test.shard(d)).collect();
            let (nll, tokens) = nll_totals(params, shards.iter().flat_map(|s| s.utterances.iter()))?;
            let utterances = shards.iter().map(|s| s.len()).sum();
            Ok(GroupStats::new(ids.len(), utterances, nll, tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let devices = deciles.iter().map(|g| g.devices).sum();
    let (nll, tokens) = nll_totals(params, test.utterances())?;
    Ok(DecileReport {
        deciles,
        overall: GroupStats::new(devices, test.num_utterances(), nll, tokens),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcpReport {
    pub baseline: String,
    pub baseline_perplexity: f64,
    /// Percent change per decile.
    pub deciles: Vec<f64>,
    pub overall: f64,
}

/// `100 (p - p_base) / p_base` for every decile and overall, where `p_base`
/// is the baseline's overall test perplexity.
pub fn rcp(report: &DecileReport, baseline_perplexity: f64, baseline: impl Into<String>) -> Result<RcpReport> {
    if !(baseline_perplexity > 0.0 && baseline_perplexity.is_finite()) {
        return Err(Error::InvalidBaseline(baseline_perplexity));
    }
    let change = |p: f64| 100.0 * (p - baseline_perplexity) / baseline_perplexity;
    Ok(RcpReport {
        baseline: baseline.into(),
        baseline_perplexity,
        deciles: report.deciles.iter().map(|g| change(g.perplexity)).collect(),
        overall: change(report.overall.perplexity),
    })
}

/// Breakdown of a device's unique utterances in one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    /// Already produced by the same device in an earlier period.
    pub seen_self: f64,
    /// New to the device but produced by another device earlier.
    pub seen_others: f64,
    /// Never seen before.
    pub new: f64,
}

impl Triple {
    pub fn sum(&self) -> f64 {
        self.seen_self + self.seen_others + self.new
    }

    fn scaled(&self, w: f64) -> Triple {
        Triple {
            seen_self: self.seen_self * w,
            seen_others: self.seen_others * w,
            new: self.new * w,
        }
    }

    fn add(&mut self, o: &Triple) {
        self.seen_self += o.seen_self;
        self.seen_others += o.seen_others;
        self.new += o.new;
    }
}

/// How devices are weighted when averaging triples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnovationWeighting {
    /// Each device counts once.
    #[default]
    Device,
    /// Devices weighted by their number of unique utterances in the period.
    Utterances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceInnovation {
    /// Zero-based period index, always at least 1.
    pub period: usize,
    pub device_id: DeviceId,
    pub unique: usize,
    pub triple: Triple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationReport {
    pub periods: Vec<usize>,
    /// Averages per activity decile. Empty when fewer than ten devices are
    /// active; `None` for a decile with no unique utterances in any period.
    pub deciles: Vec<Option<Triple>>,
    pub overall: Triple,
    pub per_device: Vec<DeviceInnovation>,
}

/// Innovation breakdown of chronological `segments`, averaged over every
/// period after the first.
pub fn innovation(segments: &[Population]) -> Result<InnovationReport> {
    innovation_weighted(segments, InnovationWeighting::Device)
}

pub fn innovation_weighted(segments: &[Population], weighting: InnovationWeighting) -> Result<InnovationReport> {
    if segments.len() < 2 {
        return Err(Error::TooFewPeriods(segments.len()));
    }

    let mut seen_by: BTreeMap<&DeviceId, HashSet<&[u32]>> = BTreeMap::new();
    let mut seen_any: HashSet<&[u32]> = HashSet::new();
    let mut per_device = Vec::new();
    for (period, seg) in segments.iter().enumerate() {
        let mut this_period: Vec<(&DeviceId, HashSet<&[u32]>)> = Vec::new();
        for shard in seg.shards() {
            let unique: HashSet<&[u32]> = shard.utterances.iter().map(|u| u.tokens.as_slice()).collect();
            if period > 0 && !unique.is_empty() {
                let own = seen_by.get(&shard.device_id);
                let (mut a, mut b, mut c) = (0usize, 0usize, 0usize);
                for u in &unique {
                    if own.is_some_and(|s| s.contains(u)) {
                        a += 1;
                    } else if seen_any.contains(u) {
                        b += 1;
                    } else {
                        c += 1;
                    }
                }
                let n = unique.len() as f64;
                per_device.push(DeviceInnovation {
                    period,
                    device_id: shard.device_id.clone(),
                    unique: unique.len(),
                    triple: Triple {
                        seen_self: a as f64 / n,
                        seen_others: b as f64 / n,
                        new: c as f64 / n,
                    },
                });
            }
            this_period.push((&shard.device_id, unique));
        }
        for (device, unique) in this_period {
            seen_any.extend(unique.iter().copied());
            seen_by.entry(device).or_default().extend(unique);
        }
    }

    let periods: Vec<usize> = (1..segments.len()).collect();
    let mut activity: BTreeMap<DeviceId, u64> = BTreeMap::new();
    for seg in segments {
        for shard in seg.shards() {
            *activity.entry(shard.device_id.clone()).or_default() += shard.len() as u64;
        }
    }
    let overall = average(&per_device, &periods, weighting, |_| true)
        .unwrap_or(Triple { seen_self: 0.0, seen_others: 0.0, new: 0.0 });
    let deciles = match activity_deciles(activity) {
        Ok(groups) => groups
            .iter()
            .map(|ids| {
                let members: HashSet<&DeviceId> = ids.iter().collect();
                average(&per_device, &periods, weighting, |d| members.contains(&d.device_id))
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    Ok(InnovationReport {
        periods,
        deciles,
        overall,
        per_device,
    })
}

/// Mean over periods of the per-period (weighted) mean over matching devices.
fn average<F>(rows: &[DeviceInnovation], periods: &[usize], weighting: InnovationWeighting, keep: F) -> Option<Triple>
where
    F: Fn(&DeviceInnovation) -> bool,
{
    let mut acc = Triple { seen_self: 0.0, seen_others: 0.0, new: 0.0 };
    let mut used = 0;
    for &p in periods {
        let mut sum = Triple { seen_self: 0.0, seen_others: 0.0, new: 0.0 };
        let mut weight = 0.0;
        for r in rows.iter().filter(|r| r.period == p && keep(r)) {
            let w = match weighting {
                InnovationWeighting::Device => 1.0,
                InnovationWeighting::Utterances => r.unique as f64,
            };
            sum.add(&r.triple.scaled(w));
            weight += w;
        }
        if weight > 0.0 {
            acc.add(&sum.scaled(1.0 / weight));
            used += 1;
        }
    }
    (used > 0).then(|| acc.scaled(1.0 / used as f64))
}

/// `decile_report.csv`: decile, devices, utterances, perplexity, rcp_percent.
/// Deciles are numbered 1 to 10, followed by an `overall` row.
pub fn write_decile_csv<W: Write>(report: &DecileReport, rcp: Option<&RcpReport>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["decile", "devices", "utterances", "perplexity", "rcp_percent"])
        .map_err(csv_err)?;
    let rows = report
        .deciles
        .iter()
        .enumerate()
        .map(|(i, g)| ((i + 1).to_string(), g, rcp.map(|r| r.deciles[i])))
        .chain(std::iter::once(("overall".to_string(), &report.overall, rcp.map(|r| r.overall))));
    for (label, g, change) in rows {
        w.write_record([
            label,
            g.devices.to_string(),
            g.utterances.to_string(),
            g.perplexity.to_string(),
            change.map(|c| c.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `innovation.csv`: decile, seen_self, seen_others, new.
pub fn write_innovation_csv<W: Write>(report: &InnovationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["decile", "seen_self", "seen_others", "new"])
        .map_err(csv_err)?;
    let rows = report
        .deciles
        .iter()
        .enumerate()
        .map(|(i, t)| ((i + 1).to_string(), *t))
        .chain(std::iter::once(("overall".to_string(), Some(report.overall))));
    for (label, t) in rows {
        let cells = match t {
            Some(t) => [t.seen_self.to_string(), t.seen_others.to_string(), t.new.to_string()],
            None => Default::default(),
        };
        w.write_record([label, cells[0].clone(), cells[1].clone(), cells[2].clone()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, ModelSpec};
    use crate::population::{DeviceShard, TimeWindow, Utterance};

    fn pop_with_counts(counts: &[usize]) -> Population {
        let shards = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let id = DeviceId(format!("d{i:05}"));
                DeviceShard {
                    device_id: id.clone(),
                    utterances: (0..n)
                        .map(|k| Utterance {
                            device_id: id.clone(),
                            day: 0,
                            tokens: vec![(k % 4) as u32, ((i + k) % 4) as u32],
                        })
                        .collect(),
                }
            })
            .collect();
        Population::new(4, TimeWindow::new(0, 30).unwrap(), shards).unwrap()
    }

    #[test]
    fn ten_thousand_devices_make_even_deciles() {
        let counts: Vec<usize> = (0..10_000).map(|i| 1 + (i * 7919) % 50).collect();
        let groups = activity_deciles(
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| (DeviceId(format!("d{i:05}")), c as u64)),
        )
        .unwrap();
        assert!(groups.iter().all(|g| g.len() == 1000));
    }

    #[test]
    fn thirteen_devices_split_within_one() {
        let pop = pop_with_counts(&[3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9]);
        let groups = decile_split(&pop).unwrap();
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 13);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let means: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().map(|d| pop.shard(d).unwrap().len() as f64).sum::<f64>() / g.len() as f64)
            .collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn too_few_devices() {
        let pop = pop_with_counts(&[1, 2, 3, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(
            decile_split(&pop),
            Err(Error::TooFewDevices { needed: 10, found: 3 })
        ));
    }

    #[test]
    fn uniform_model_has_vocab_perplexity_everywhere() {
        let pop = pop_with_counts(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
        let params = ModelParams::zeros(ModelSpec::new(ModelKind::Bigram, 4, 2).unwrap()).unwrap();
        let report = evaluate(&params, &pop).unwrap();
        for g in report.deciles.iter().chain([&report.overall]) {
            assert!((g.perplexity - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rcp_arithmetic() {
        let pop = pop_with_counts(&[1; 10]);
        let params = ModelParams::zeros(ModelSpec::new(ModelKind::Logistic, 4, 1).unwrap()).unwrap();
        let report = evaluate(&params, &pop).unwrap();
        let p = report.overall.perplexity;
        assert_eq!(rcp(&report, p, "self").unwrap().overall, 0.0);
        assert!((rcp(&report, p / 1.05, "b").unwrap().overall - 5.0).abs() < 1e-9);
        assert!((rcp(&report, p / 0.95, "b").unwrap().overall + 5.0).abs() < 1e-9);
        assert!(rcp(&report, 0.0, "b").is_err());
        assert!(rcp(&report, -1.0, "b").is_err());
    }

    #[test]
    fn innovation_needs_two_periods() {
        let pop = pop_with_counts(&[1, 2]);
        assert!(matches!(innovation(&[pop]), Err(Error::TooFewPeriods(1))));
    }

    fn seg(devices: &[(&str, &[&[u32]])]) -> Population {
        let shards = devices
            .iter()
            .map(|(id, utts)| DeviceShard {
                device_id: (*id).into(),
                utterances: utts
                    .iter()
                    .map(|t| Utterance {
                        device_id: (*id).into(),
                        day: 0,
                        tokens: t.to_vec(),
                    })
                    .collect(),
            })
            .collect();
        Population::new(100, TimeWindow::new(0, 1).unwrap(), shards).unwrap()
    }

    #[test]
    fn repeating_own_history_is_all_seen_self() {
        let p1 = seg(&[("a", &[&[1, 2], &[3]])]);
        let p2 = seg(&[("a", &[&[3], &[1, 2], &[3]])]);
        let report = innovation(&[p1, p2]).unwrap();
        assert_eq!(report.per_device[0].triple, Triple { seen_self: 1.0, seen_others: 0.0, new: 0.0 });
        assert_eq!(report.per_device[0].unique, 2);
    }

    #[test]
    fn disjoint_vocabularies_are_all_new() {
        let p1 = seg(&[("a", &[&[1]]), ("b", &[&[2]])]);
        let p2 = seg(&[("a", &[&[3]]), ("b", &[&[4]])]);
        let p3 = seg(&[("a", &[&[5]]), ("b", &[&[6]])]);
        let report = innovation(&[p1, p2, p3]).unwrap();
        assert_eq!(report.overall, Triple { seen_self: 0.0, seen_others: 0.0, new: 1.0 });
        assert_eq!(report.periods, [1, 2]);
        assert!(report.deciles.is_empty());
    }

    #[test]
    fn silent_devices_are_excluded() {
        let p1 = seg(&[("a", &[&[1]]), ("b", &[&[2]])]);
        let p2 = seg(&[("a", &[&[1]]), ("b", &[])]);
        let report = innovation(&[p1, p2]).unwrap();
        assert_eq!(report.per_device.len(), 1);
        assert_eq!(report.overall.seen_self, 1.0);
    }

    #[test]
    fn utterance_weighting_differs_from_device_weighting() {
        let p1 = seg(&[("a", &[&[1]]), ("b", &[&[9]])]);
        let p2 = seg(&[("a", &[&[1]]), ("b", &[&[7], &[8], &[9]])]);
        let by_device = innovation_weighted(&[p1.clone(), p2.clone()], InnovationWeighting::Device).unwrap();
        let by_utt = innovation_weighted(&[p1, p2], InnovationWeighting::Utterances).unwrap();
        // a: (1,0,0) with 1 unique; b: (1/3,0,2/3) with 3 unique
        assert!((by_device.overall.seen_self - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((by_utt.overall.seen_self - 2.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn csv_columns_are_fixed() {
        let pop = pop_with_counts(&[1; 10]);
        let params = ModelParams::zeros(ModelSpec::new(ModelKind::Logistic, 4, 1).unwrap()).unwrap();
        let report = evaluate(&params, &pop).unwrap();
        let change = rcp(&report, 4.0, "uniform").unwrap();
        let mut buf = Vec::new();
        write_decile_csv(&report, Some(&change), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "decile,devices,utterances,perplexity,rcp_percent");
        assert_eq!(lines.len(), 12);
        assert!(lines[11].starts_with("overall,10,10,"));

        let p1 = seg(&[("a", &[&[1]])]);
        let p2 = seg(&[("a", &[&[1], &[2]])]);
        let mut buf = Vec::new();
        write_innovation_csv(&innovation(&[p1, p2]).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "decile,seen_self,seen_others,new\noverall,0.5,0,0.5\n");
    }
}
