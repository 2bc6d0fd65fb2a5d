use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spinfer_core::graph::{build_encoder, optimize, Executor};
use spinfer_core::model_io::{generate_synthetic_model, random_input};
use spinfer_core::Backend;

fn encoder(c: &mut Criterion) {
    let mut g = c.benchmark_group("bert-mini");
    g.sample_size(20);
    let model = generate_synthetic_model(4, 256, 4, 1024, 0.9, 1).expect("valid preset");
    for seq in [16, 128] {
        let base = build_encoder(&model, 1, seq).expect("encoder graph");
        let x = random_input(1, seq, 256, 2);
        for (name, graph) in [("unfused", base.clone()), ("fused", optimize(&base).expect("optimizes"))] {
            let mut exec = Executor::new(Arc::new(graph), 1, Backend::detect()).expect("executor");
            let mut out = exec.alloc_outputs();
            g.bench_function(BenchmarkId::new(name, seq), |b| b.iter(|| exec.run_into(&[&x], &mut out).expect("runs")));
        }
    }
    g.finish();
}

criterion_group!(benches, encoder);
criterion_main!(benches);
