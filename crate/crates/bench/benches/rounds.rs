use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedsim_core::models::sgd_epoch;
use fedsim_core::{
    aggregate, evaluate, generate_population, init_params, restrict_to_window, run_one_shot, select_cohort,
    selection_probabilities, device_counts, Algorithm, DatasetSpec, LocalUpdate, ModelKind, Population, RoundConfig,
    SelectionStrategy, TimeWindow,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_population() -> Population {
    generate_population(&DatasetSpec::default()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let pop = desk_population();
    let init = init_params(ModelKind::Bigram, 200, 16, 0).unwrap();

    let shard = pop.shards().iter().max_by_key(|s| s.len()).unwrap();
    c.bench_function("sgd_epoch/largest_shard", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| sgd_epoch(&init, &shard.utterances, 0.5, 64, &mut rng).unwrap())
    });

    let updates: Vec<LocalUpdate> = pop
        .shards()
        .iter()
        .take(50)
        .enumerate()
        .map(|(i, s)| LocalUpdate {
            device_id: s.device_id.clone(),
            count: s.len() as u64 + 1,
            params: init_params(ModelKind::Bigram, 200, 16, i as u64).unwrap(),
            mean_loss: 0.0,
        })
        .collect();
    c.bench_function("aggregate/50_devices", |b| b.iter(|| aggregate(black_box(&updates)).unwrap()));

    let counts = device_counts(&pop);
    for strategy in [SelectionStrategy::Uniform, SelectionStrategy::InvLogPlusOne] {
        let dist = selection_probabilities(strategy, &counts).unwrap();
        c.bench_function(&format!("select_cohort/{strategy}/k50"), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| select_cohort(&dist, 50, &mut rng).unwrap())
        });
    }

    let test = restrict_to_window(&pop, TimeWindow::months(11, 12).unwrap()).unwrap();
    c.bench_function("evaluate/test_month", |b| b.iter(|| evaluate(black_box(&init), &test).unwrap()));
}

fn rounds(c: &mut Criterion) {
    let pop = desk_population();
    let init = init_params(ModelKind::Bigram, 200, 16, 0).unwrap();
    let window = TimeWindow::months(5, 11).unwrap();
    let cfg = RoundConfig {
        rounds: 5,
        ..RoundConfig::default()
    };
    let mut group = c.benchmark_group("run_one_shot");
    group.sample_size(10);
    for algorithm in [Algorithm::FedAvg, Algorithm::FedOpt] {
        group.bench_function(format!("{algorithm}/uniform/5_rounds"), |b| {
            b.iter_batched(
                || init.clone(),
                |init| run_one_shot(&pop, window, SelectionStrategy::Uniform, algorithm, &cfg, &init).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, kernels, rounds);
criterion_main!(benches);
