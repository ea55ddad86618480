//! Independent pre-training runs dispatched through `map_jobs`, sequentially
//! and on the rayon pool. Without the `parallel` feature both arms run
//! sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossl::data::{generate_synthetic, SyntheticConfig, SyntheticModality};
use crossl::model::{AggregatorSpec, ConvLayerSpec, EncoderSpec, ModelSpec, ModelState};
use crossl::parallel::{map_jobs, parallel_enabled};
use crossl::train::{pretrain, TrainConfig};

fn fixture() -> (crossl::data::MultimodalDataset, ModelSpec) {
    let m = |name: &str, window_len, channels| SyntheticModality { name: name.into(), window_len, channels };
    let data = generate_synthetic(&SyntheticConfig {
        samples_per_class: 40,
        num_classes: 3,
        modalities: vec![m("accel", 40, 3), m("gyro", 60, 3), m("ppg", 30, 1)],
        ..SyntheticConfig::default()
    })
    .unwrap()
    .without_labels();
    let layer = |out_channels, kernel_width, stride| ConvLayerSpec { out_channels, kernel_width, stride };
    let spec = ModelSpec {
        modalities: data.modalities.clone(),
        encoder: EncoderSpec { conv: [layer(8, 5, 2), layer(16, 5, 2), layer(16, 3, 1)], embedding_dim: 16 },
        aggregator: AggregatorSpec { hidden: vec![32], output_dim: 16 },
        num_classes: 3,
    };
    (data, spec)
}

fn bench_map_jobs(c: &mut Criterion) {
    let (data, spec) = fixture();
    let seeds: Vec<u64> = (0..4).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).max(2);
    let mut group = c.benchmark_group(format!("pretrain_x4 (parallel feature: {})", parallel_enabled()));
    group.sample_size(10);
    for jobs in [1, threads] {
        group.bench_with_input(BenchmarkId::new("jobs", jobs), &jobs, |b, &jobs| {
            b.iter(|| {
                map_jobs(&seeds, jobs, |&seed| {
                    let init = ModelState::init(spec.clone(), seed)?;
                    let cfg = TrainConfig { ssl_epochs: 2, seed, ..TrainConfig::default() };
                    pretrain(&data, &init, &cfg).map(|(_, t)| t.epochs.len())
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_map_jobs);
criterion_main!(benches);
