use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use pcc_core::equilibrium::{best_response, find_equilibrium, run_dynamics, EquilibriumOptions};
use pcc_core::utility::{min_alpha, GameModel, Rate};

fn model(n: usize) -> GameModel {
    GameModel::new(Rate::new(100.0).unwrap(), min_alpha(n).unwrap(), n).unwrap()
}

fn bench_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle");
    group.bench_function("best_response_n2", |b| {
        let m = model(2);
        let others = [Rate::new(50.0).unwrap()];
        b.iter(|| black_box(best_response(0, &others, &m, 0.01).unwrap()))
    });
    group.bench_function("find_equilibrium_n4", |b| {
        let m = model(4);
        let opts = EquilibriumOptions::for_model(&m);
        b.iter(|| black_box(find_equilibrium(&m, &opts).unwrap()))
    });
    group.bench_function("dynamics_10k_steps_n3", |b| {
        let m = model(3);
        b.iter(|| black_box(run_dynamics(&m, &[20.0, 70.0, 40.0], 0.01, 10_000).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_oracle);
criterion_main!(benches);
