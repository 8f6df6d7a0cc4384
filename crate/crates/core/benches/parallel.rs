use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use gram_core::inference::{self, DecoderMode, RolloutConfig};
use gram_core::model::{Guidance, ModelConfig};
use gram_core::numerics::Exec;
use gram_core::tasks;
use gram_core::trainer::{EarlyNoise, TrainConfig, Trainer};

fn queens_model() -> ModelConfig {
    ModelConfig { d_model: 32, n_puzzle: 4, heads: 2, ffn: 64, head_hidden: 32, n_sup: 4, guidance: Guidance::Full, ..ModelConfig::desk(25, 3) }
}

fn executors() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn sampling(c: &mut Criterion) {
    let ds = tasks::gen_nqueens(5, &[4, 5], 0).unwrap();
    let items = ds.eval_items(&ds.train);
    let tr = Trainer::new(queens_model(), TrainConfig::default()).unwrap();
    let rc = RolloutConfig { output_len: Some(25), decoder: DecoderMode::Sampled, ..RolloutConfig::new(4) };
    let mut group = c.benchmark_group("sample_items");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| inference::sample_items(&tr.model, &tr.ema, &tr.z0, &items, 8, &rc, 0, exec).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let ds = tasks::gen_nqueens(5, &[4, 5], 0).unwrap();
    let pairs = ds.examples(&ds.train);
    let cfg = TrainConfig { batch_size: 8, early_noise: EarlyNoise::Prior, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter_batched(
                || {
                    let mut tr = Trainer::new(queens_model(), cfg.clone()).unwrap();
                    tr.exec = exec;
                    tr
                },
                |mut tr| tr.train_epoch(&pairs, 0).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, sampling, training);
criterion_main!(benches);
