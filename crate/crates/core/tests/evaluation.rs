mod common;

use common::{period, population};
use fedsim_core::eval::Triple;
use fedsim_core::models::perplexity;
use fedsim_core::{
    decile_split, evaluate, init_params, innovation, DeviceShard, ModelKind, ModelParams, ModelSpec, Population,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reversed(pop: &Population) -> Population {
    let shards: Vec<DeviceShard> = pop
        .shards()
        .iter()
        .rev()
        .map(|s| DeviceShard {
            device_id: s.device_id.clone(),
            utterances: s.utterances.iter().rev().cloned().collect(),
        })
        .collect();
    Population::new(pop.vocab_size(), pop.time_range(), shards).unwrap()
}

#[test]
fn uniform_predictor_has_vocabulary_perplexity() {
    let counts: Vec<usize> = (1..=40).collect();
    let pop = population(37, 30, &counts, 4, 1);
    for kind in [ModelKind::Logistic, ModelKind::Bigram] {
        let params = ModelParams::zeros(ModelSpec::new(kind, 37, 5).unwrap()).unwrap();
        assert!((perplexity(&params, pop.utterances()).unwrap() - 37.0).abs() < 1e-9);
        let report = evaluate(&params, &pop).unwrap();
        for g in report.deciles.iter().chain([&report.overall]) {
            assert!((g.perplexity - 37.0).abs() < 1e-9);
        }
    }
}

#[test]
fn perplexity_ignores_utterance_order() {
    let counts: Vec<usize> = (0..60).map(|i| 1 + i % 13).collect();
    let pop = population(20, 30, &counts, 5, 2);
    let params = init_params(ModelKind::Bigram, 20, 6, 9).unwrap();
    let flipped = reversed(&pop);
    assert_eq!(
        perplexity(&params, pop.utterances()).unwrap().to_bits(),
        perplexity(&params, flipped.utterances()).unwrap().to_bits()
    );
    assert_eq!(evaluate(&params, &pop).unwrap(), evaluate(&params, &flipped).unwrap());
}

#[test]
fn ten_thousand_devices_split_into_thousands() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let counts: Vec<usize> = (0..10_000).map(|_| rng.gen_range(1..30)).collect();
    let pop = population(4, 1, &counts, 1, 3);
    let groups = decile_split(&pop).unwrap();
    assert_eq!(groups.len(), 10);
    assert!(groups.iter().all(|g| g.len() == 1_000));
}

fn check_deciles(counts: &[usize]) -> Result<(), TestCaseError> {
    let pop = population(4, 1, counts, 1, 0);
    let groups = decile_split(&pop).unwrap();
    let active = counts.iter().filter(|&&c| c > 0).count();
    prop_assert_eq!(groups.len(), 10);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    prop_assert_eq!(sizes.iter().sum::<usize>(), active);
    let activity = |d| pop.shard(d).unwrap().len() as f64;
    let means: Vec<f64> = groups.iter().map(|g| g.iter().map(activity).sum::<f64>() / g.len() as f64).collect();
    prop_assert!(means.windows(2).all(|w| w[0] <= w[1]), "{:?}", means);
    // every member of a lower group is at most as active as any higher one
    for w in groups.windows(2) {
        let low = w[0].iter().map(activity).fold(f64::NEG_INFINITY, f64::max);
        let high = w[1].iter().map(activity).fold(f64::INFINITY, f64::min);
        prop_assert!(low <= high);
    }
    Ok(())
}

proptest! {
    #[test]
    fn deciles_are_balanced_and_ordered(counts in prop::collection::vec(1usize..50, 10..400)) {
        check_deciles(&counts)?;
    }

    #[test]
    fn silent_devices_stay_out_of_deciles(counts in prop::collection::vec(0usize..5, 40..200)) {
        prop_assume!(counts.iter().filter(|&&c| c > 0).count() >= 10);
        check_deciles(&counts)?;
    }
}

/// Classifies every unique utterance by scanning all earlier periods.
fn brute_force(periods: &[Population]) -> (Vec<(usize, String, Triple)>, Triple) {
    let mut rows = Vec::new();
    for (p, seg) in periods.iter().enumerate().skip(1) {
        for shard in seg.shards() {
            let mut unique: Vec<&Vec<u32>> = Vec::new();
            for u in &shard.utterances {
                if !unique.contains(&&u.tokens) {
                    unique.push(&u.tokens);
                }
            }
            if unique.is_empty() {
                continue;
            }
            let (mut own, mut others, mut new) = (0, 0, 0);
            for u in &unique {
                let earlier = |same: bool| {
                    periods[..p].iter().any(|q| {
                        q.shards().iter().any(|s| {
                            (s.device_id == shard.device_id) == same && s.utterances.iter().any(|x| &x.tokens == *u)
                        })
                    })
                };
                if earlier(true) {
                    own += 1;
                } else if earlier(false) {
                    others += 1;
                } else {
                    new += 1;
                }
            }
            let n = unique.len() as f64;
            let t = Triple { seen_self: own as f64 / n, seen_others: others as f64 / n, new: new as f64 / n };
            rows.push((p, shard.device_id.0.clone(), t));
        }
    }
    let mut overall = Triple { seen_self: 0.0, seen_others: 0.0, new: 0.0 };
    let mut used = 0.0;
    for p in 1..periods.len() {
        let in_p: Vec<&Triple> = rows.iter().filter(|r| r.0 == p).map(|r| &r.2).collect();
        if in_p.is_empty() {
            continue;
        }
        let k = in_p.len() as f64;
        overall.seen_self += in_p.iter().map(|t| t.seen_self).sum::<f64>() / k;
        overall.seen_others += in_p.iter().map(|t| t.seen_others).sum::<f64>() / k;
        overall.new += in_p.iter().map(|t| t.new).sum::<f64>() / k;
        used += 1.0;
    }
    overall.seen_self /= used;
    overall.seen_others /= used;
    overall.new /= used;
    (rows, overall)
}

#[test]
fn hand_built_fixture_matches_enumeration() {
    let p1 = period(&[("a", &[&[1], &[2]]), ("b", &[&[3]]), ("c", &[&[4], &[5]])]);
    let p2 = period(&[("a", &[&[1], &[3], &[6], &[1]]), ("b", &[&[3], &[4]]), ("c", &[&[5], &[7]])]);
    let periods = [p1, p2];
    let report = innovation(&periods).unwrap();
    let (rows, overall) = brute_force(&periods);

    let third = 1.0 / 3.0;
    let hand = [
        ("a", Triple { seen_self: third, seen_others: third, new: third }),
        ("b", Triple { seen_self: 0.5, seen_others: 0.5, new: 0.0 }),
        ("c", Triple { seen_self: 0.5, seen_others: 0.0, new: 0.5 }),
    ];
    assert_eq!(report.per_device.len(), 3);
    for ((got, (p, dev, brute)), (name, want)) in report.per_device.iter().zip(&rows).zip(hand) {
        assert_eq!((got.period, got.device_id.as_str()), (*p, dev.as_str()));
        assert_eq!(got.device_id.as_str(), name);
        assert_eq!(got.triple, *brute);
        assert_eq!(got.triple, want);
    }
    assert_eq!(report.overall, overall);
    assert!((overall.seen_self - 4.0 / 9.0).abs() < 1e-15);
    assert!((overall.seen_others - 5.0 / 18.0).abs() < 1e-15);
    assert!((overall.new - 5.0 / 18.0).abs() < 1e-15);
}

fn random_periods(seed: u64, devices: usize, periods: usize) -> Vec<Population> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..periods)
        .map(|_| {
            let counts: Vec<usize> = (0..devices).map(|_| rng.gen_range(0..8)).collect();
            population(5, 1, &counts, rng.gen_range(1..3), rng.gen())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_populations_match_enumeration(seed in any::<u64>(), devices in 1usize..30, periods in 2usize..5) {
        let segs = random_periods(seed, devices, periods);
        let report = innovation(&segs).unwrap();
        let (rows, overall) = brute_force(&segs);
        prop_assert_eq!(report.per_device.len(), rows.len());
        for (got, (p, dev, t)) in report.per_device.iter().zip(&rows) {
            prop_assert_eq!(got.period, *p);
            prop_assert_eq!(got.device_id.as_str(), dev.as_str());
            prop_assert_eq!(got.triple, *t);
            prop_assert!((got.triple.sum() - 1.0).abs() <= 1e-12);
        }
        if !rows.is_empty() {
            for (a, b) in [
                (report.overall.seen_self, overall.seen_self),
                (report.overall.seen_others, overall.seen_others),
                (report.overall.new, overall.new),
            ] {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!((report.overall.sum() - 1.0).abs() <= 1e-12);
        }
        for t in report.deciles.iter().flatten() {
            prop_assert!((t.sum() - 1.0).abs() <= 1e-12);
        }
    }
}

