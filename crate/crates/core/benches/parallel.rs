use std::hint::black_box;

use bayescope::cli::experiment::{prepare_data, run_variants, Suite};
use bayescope::inference::{predict_batch, split_samples};
use bayescope::models::{ModelSpec, Variant};
use bayescope::par::Parallelism;
use bayescope::training::{fit, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn modes() -> Vec<(&'static str, Parallelism)> {
    let n = std::thread::available_parallelism().map_or(4, |n| n.get().max(2));
    vec![("sequential", Parallelism::Sequential), ("threads", Parallelism::Threads(n))]
}

fn bench_predict(c: &mut Criterion) {
    let cfg = Suite::BothChannels.config(0);
    let data = prepare_data(&cfg).unwrap();
    let mut spec = ModelSpec::vector(Variant::BcnnSigma, 2, 0);
    spec.hidden = cfg.model.hidden.clone();
    let (model, _) = fit(
        spec,
        &data.train.to_batch().unwrap(),
        &TrainConfig { epochs: 5, ..TrainConfig::default() },
    )
    .unwrap();
    let inputs = split_samples(&data.full.features).unwrap();
    let mut group = c.benchmark_group("predict_batch_328x20");
    group.sample_size(10);
    for (name, par) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| black_box(predict_batch(&model, &inputs, 20, 7, par).unwrap()))
        });
    }
    group.finish();
}

fn bench_variants(c: &mut Criterion) {
    let mut cfg = Suite::BothChannels.config(0);
    cfg.train.epochs = 20;
    let data = prepare_data(&cfg).unwrap();
    let mut group = c.benchmark_group("four_variants_20_epochs");
    group.sample_size(10);
    for (name, par) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| black_box(run_variants(&cfg, &data, &Variant::ALL, par).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_predict, bench_variants);
criterion_main!(benches);
