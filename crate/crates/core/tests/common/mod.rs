#![allow(dead_code)]

use fedsim_core::{DeviceId, DeviceShard, Population, TimeWindow, Utterance};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn id(i: usize) -> DeviceId {
    DeviceId(format!("d{i:05}"))
}

/// Devices with the given numbers of utterances, spread over `days`.
pub fn population(vocab: u32, days: u32, counts: &[usize], len: usize, seed: u64) -> Population {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shards = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| DeviceShard {
            device_id: id(i),
            utterances: (0..n)
                .map(|_| Utterance {
                    device_id: id(i),
                    day: rng.gen_range(0..days),
                    tokens: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
                })
                .collect(),
        })
        .collect();
    Population::new(vocab, TimeWindow::new(0, days).unwrap(), shards).unwrap()
}

/// One period of hand-written utterances per device.
pub fn period(devices: &[(&str, &[&[u32]])]) -> Population {
    let shards = devices
        .iter()
        .map(|(name, utts)| DeviceShard {
            device_id: DeviceId::new(*name),
            utterances: utts
                .iter()
                .map(|t| Utterance {
                    device_id: DeviceId::new(*name),
                    day: 0,
                    tokens: t.to_vec(),
                })
                .collect(),
        })
        .collect();
    Population::new(64, TimeWindow::new(0, 1).unwrap(), shards).unwrap()
}
