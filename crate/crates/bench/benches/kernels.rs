use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ucvme::model::{MlpConfig, MlpModel, Mode};
use ucvme::numeric::RngState;
use ucvme::training::{self, Variant};
use ucvme::vme;
use ucvme_bench::{random_matrix, train_fixture};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn forward_backward(c: &mut Criterion) {
    let model = MlpModel::init(MlpConfig::new(8, vec![64, 64], 0.05), &mut RngState::substream(0, 2)).unwrap();
    let x = random_matrix(32, 8, 4);
    let ones = vec![1.0 / 32.0; 32];
    let mut rng = RngState::substream(0, 4);
    c.bench_function("forward_stochastic_32x8", |b| {
        b.iter(|| black_box(model.forward(&x, Mode::Stochastic(&mut rng)).unwrap()))
    });
    let trace = model.forward(&x, Mode::Stochastic(&mut rng)).unwrap();
    c.bench_function("backward_32x8", |b| {
        b.iter(|| black_box(model.backward(&trace, &ones, &ones).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    for v in Variant::ALL {
        let (cfg, mut state, labeled, unlabeled) = train_fixture(v, 8, 32);
        g.bench_function(v.name(), |b| {
            b.iter(|| black_box(training::train_step(&mut state, &labeled, &unlabeled, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn pseudo_labels(c: &mut Criterion) {
    let (_, state, _, unlabeled) = train_fixture(Variant::Full, 8, 32);
    let mut g = c.benchmark_group("pseudo_labels");
    for t in [1, 5, 20] {
        let mut rng = RngState::substream(0, 5);
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| {
                black_box(vme::generate_pseudo_labels(&state.model_a, &state.model_b, &unlabeled, t, &mut rng).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, forward_backward, train_step, pseudo_labels);
criterion_main!(benches);
