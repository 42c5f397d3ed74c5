use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lvit_bench::{default_model, random_images, random_tensor};
use lvit_core::{fit, gen_synthetic, RngState, Tape, TrainConfig};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = RngState::new(0);
    for n in [64, 256] {
        let a = random_tensor(&[n, n], &mut rng);
        let b = random_tensor(&[n, n], &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = default_model(0);
    let images = random_images(64, 1);
    let refs: Vec<_> = images.iter().collect();
    c.bench_function("forward/single", |b| {
        b.iter(|| black_box(model.forward(&images[0], &mut RngState::new(0), false).unwrap()))
    });
    c.bench_function("forward/batch64", |b| b.iter(|| black_box(model.logits_eval(&refs, 64).unwrap())));
}

fn train_epoch(c: &mut Criterion) {
    let data = gen_synthetic(7, 0, 0.3).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("epoch70", |b| {
        b.iter(|| {
            let mut model = default_model(0);
            black_box(fit(&mut model, &data, &cfg, |_| {}).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, forward, train_epoch);
criterion_main!(benches);
