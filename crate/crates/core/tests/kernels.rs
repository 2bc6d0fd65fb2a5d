use std::sync::Arc;

use proptest::prelude::*;
use spinfer_core::kernels::{
    dense_exec, spmm_exec, spmm_ref, ActivationLayout, DenseActivationLayout, DensePlan, Epilogue, LinearParams,
    OutputLayout, PackedDenseWeight, SpmmConfig, SpmmPlan,
};
use spinfer_core::sparse::generate_pattern_weight;
use spinfer_core::tensor::{QuantDType, QuantParams};
use spinfer_core::{Backend, Sparse4x1Weight, Tensor};

/// Plain i64 triple loop with the accumulator wrapped to 32 bits at the end.
fn wide_loop(w: &[i8], m: usize, k: usize, act: &[u8], n: usize, a_zp: i32, bias: &[i32]) -> Vec<i32> {
    let mut out = vec![0; m * n];
    for r in 0..m {
        for c in 0..n {
            let s: i64 = (0..k).map(|x| w[r * k + x] as i64 * (act[x * n + c] as i64 - a_zp as i64)).sum();
            out[r * n + c] = (s + bias[r] as i64) as i32;
        }
    }
    out
}

struct Case {
    w: Tensor,
    act: Vec<u8>,
    a_zp: i32,
    bias: Vec<i32>,
    n: usize,
}

fn case(m: usize, k: usize, n: usize, ratio: f64, seed: u64) -> Case {
    let w = generate_pattern_weight(m, k, ratio, seed);
    let mut s = seed;
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 33) as u32
    };
    let act = (0..k * n).map(|_| next() as u8).collect();
    let a_zp = (next() % 256) as i32;
    let bias = (0..m).map(|_| (next() % 20000) as i32 - 10000).collect();
    Case { w, act, a_zp, bias, n }
}

fn run_sparse(c: &Case, threads: usize, backend: Backend, layout: OutputLayout, epi: &Epilogue) -> Tensor {
    let weight = Arc::new(Sparse4x1Weight::encode(&c.w).unwrap());
    let k = weight.cols();
    let cfg = SpmmConfig { threads, backend, layout, ..SpmmConfig::default() };
    let params = LinearParams { a_zp: c.a_zp, bias: c.bias.clone(), epilogue: epi.clone() };
    let plan = SpmmPlan::new(weight, c.n, cfg, params).unwrap();
    let act = ActivationLayout::from_kn(&c.act, k, c.n, cfg.tiling.bn).unwrap();
    let pool = (threads > 1).then(|| rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap());
    spmm_exec(&plan, &act, pool.as_ref()).unwrap()
}

fn backends() -> Vec<Backend> {
    [Backend::Portable, Backend::Avx512Vnni].into_iter().filter(|b| b.is_supported()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sparse_kernel_equals_wide_loop(
        m in 1usize..40, k in 1usize..80, n in 1usize..140, ratio in 0.0f64..0.95, seed in any::<u64>(), threads in 1usize..5,
    ) {
        let c = case(m, k, n, ratio, seed);
        let want = wide_loop(c.w.as_s8().unwrap(), m, k, &c.act, n, c.a_zp, &c.bias);
        for backend in backends() {
            let got = run_sparse(&c, threads, backend, OutputLayout::RowMajor, &Epilogue::accumulator());
            prop_assert_eq!(got.as_s32().unwrap(), &want[..]);
        }
    }

    #[test]
    fn layouts_and_threads_agree_under_requantization(
        m in 1usize..24, k in 1usize..64, n in 1usize..100, seed in any::<u64>(),
    ) {
        let c = case(m, k, n, 0.8, seed);
        let scales: Vec<f32> = (0..m).map(|i| 1e-3 * (1 + i % 7) as f32).collect();
        let out = QuantParams::per_tensor(QuantDType::S8, 0.05, -3).unwrap();
        let epi = Epilogue::requantize(0.02, &scales, out).unwrap();
        let weight = Sparse4x1Weight::encode(&c.w).unwrap();
        let a = Tensor::from_u8([k, n], c.act.clone()).unwrap();
        let want = spmm_ref(&weight, &a, c.a_zp, &c.bias, &epi, &[]).unwrap();
        for backend in backends() {
            prop_assert_eq!(&run_sparse(&c, 1, backend, OutputLayout::RowMajor, &epi), &want);
            let t = run_sparse(&c, 3, backend, OutputLayout::Transposed, &epi);
            let t = t.as_s8().unwrap();
            for r in 0..m {
                for col in 0..n {
                    prop_assert_eq!(t[col * m + r], want.as_s8().unwrap()[r * n + col]);
                }
            }
        }
    }
}

#[test]
fn dense_baseline_matches_sparse_reference_on_the_grid_corners() {
    for (m, k, n) in [(256, 256, 16), (64, 1024, 50), (1024, 64, 1), (12, 12, 384)] {
        let c = case(m, k, n, 0.7, (m * k + n) as u64);
        let epi = Epilogue::accumulator();
        let weight = Sparse4x1Weight::encode(&c.w).unwrap();
        let a = Tensor::from_u8([k, n], c.act.clone()).unwrap();
        let want = spmm_ref(&weight, &a, c.a_zp, &c.bias, &epi, &[]).unwrap();
        let cfg = SpmmConfig::with_threads(2);
        let params = LinearParams { a_zp: c.a_zp, bias: c.bias.clone(), epilogue: epi };
        let plan = DensePlan::new(Arc::new(PackedDenseWeight::pack(&c.w).unwrap()), n, cfg, params).unwrap();
        let act = DenseActivationLayout::from_kn(&c.act, k, n, cfg.tiling.bn).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        assert_eq!(dense_exec(&plan, &act, Some(&pool)).unwrap(), want, "{m}x{k}x{n}");
        assert_eq!(run_sparse(&c, 2, Backend::detect(), OutputLayout::RowMajor, &Epilogue::accumulator()), want);
    }
}
