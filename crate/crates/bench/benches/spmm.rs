use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use spinfer_bench::GemmCase;

const SHAPES: [(usize, usize); 3] = [(256, 1024), (768, 768), (1024, 4096)];

fn sparse_vs_dense(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    g.sample_size(20);
    for (m, k) in SHAPES {
        for n in [16, 128, 384] {
            let dense = GemmCase::new(m, k, n, 0.0, 1, 1);
            g.throughput(Throughput::Elements((m * k * n) as u64));
            g.bench_with_input(BenchmarkId::new("dense", format!("{m}x{k}x{n}")), &dense, |b, c| {
                b.iter(|| c.run_dense(None))
            });
            for ratio in [0.7, 0.8, 0.9] {
                let case = GemmCase::new(m, k, n, ratio, 1, 1);
                let id = BenchmarkId::new(format!("sparse{:.0}", ratio * 100.0), format!("{m}x{k}x{n}"));
                g.bench_with_input(id, &case, |b, c| b.iter(|| c.run_sparse(None)));
            }
        }
    }
    g.finish();
}

fn threads(c: &mut Criterion) {
    let mut g = c.benchmark_group("threads");
    g.sample_size(20);
    for t in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().expect("pool");
        let case = GemmCase::new(768, 768, 384, 0.8, t, 2);
        g.bench_function(BenchmarkId::new("768x768x384", t), |b| b.iter(|| case.run_sparse(Some(&pool))));
    }
    g.finish();
}

criterion_group!(benches, sparse_vs_dense, threads);
criterion_main!(benches);
