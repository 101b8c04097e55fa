use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use pcc_core::sim::{self, FlowSpec, LinkPlan, LinkSpec, Scenario};
use pcc_core::trace::NullSink;
use pcc_core::utility::Rate;

fn scenario(flows: usize, duration: f64, loss: f64) -> Scenario {
    let capacity = Rate::from_mbps(100.0, 1500).unwrap();
    let link = LinkSpec::new(capacity, 0.015, 250)
        .unwrap()
        .with_random_loss(loss)
        .unwrap();
    Scenario {
        link: LinkPlan::Static(link),
        flows: (0..flows as u32)
            .map(|i| FlowSpec::pcc(i, &link, 0.0, duration).unwrap())
            .collect(),
        duration,
        seed: 1,
        packet_size: 1500,
    }
}

fn bench_sim(c: &mut Criterion) {
    let mut group = c.benchmark_group("sim");
    group.sample_size(10);
    group.bench_function("single_flow_10s", |b| {
        let s = scenario(1, 10.0, 0.0);
        b.iter(|| {
            let mut sink = NullSink;
            black_box(sim::run_with_sink(&s, &mut sink).unwrap());
        })
    });
    group.bench_function("single_flow_10s_lossy", |b| {
        let s = scenario(1, 10.0, 0.01);
        b.iter(|| {
            let mut sink = NullSink;
            black_box(sim::run_with_sink(&s, &mut sink).unwrap());
        })
    });
    group.bench_function("four_flows_10s", |b| {
        let s = scenario(4, 10.0, 0.0);
        b.iter(|| {
            let mut sink = NullSink;
            black_box(sim::run_with_sink(&s, &mut sink).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, bench_sim);
criterion_main!(benches);
