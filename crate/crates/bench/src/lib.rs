//! Operand builders shared by the criterion benches.

use std::sync::Arc;

pub use spinfer_core;
use spinfer_core::kernels::{
    dense_exec, spmm_exec, ActivationLayout, DenseActivationLayout, DensePlan, LinearParams, PackedDenseWeight,
    SpmmConfig, SpmmPlan,
};
use spinfer_core::sparse::generate_pattern_weight;
use spinfer_core::{Sparse4x1Weight, Tensor};

/// A sparse and a dense GEMM over the same `[M x K]` weight and `[K x N]`
/// activation, accumulator output.
pub struct GemmCase {
    pub sparse: SpmmPlan,
    pub dense: DensePlan,
    sparse_act: ActivationLayout,
    dense_act: DenseActivationLayout,
}

impl GemmCase {
    pub fn new(m: usize, k: usize, n: usize, ratio: f64, threads: usize, seed: u64) -> Self {
        let w = generate_pattern_weight(m, k, ratio, seed);
        let act: Vec<u8> = (0..k * n).map(|i| (i.wrapping_mul(2_654_435_761) >> 7) as u8).collect();
        let cfg = SpmmConfig::with_threads(threads);
        let params = LinearParams { a_zp: 128, bias: vec![0; m], ..LinearParams::default() };
        let sparse_w = Arc::new(Sparse4x1Weight::encode(&w).expect("any S8 matrix encodes"));
        let dense_w = Arc::new(PackedDenseWeight::pack(&w).expect("any S8 matrix packs"));
        Self {
            sparse: SpmmPlan::new(sparse_w, n, cfg, params.clone()).expect("valid plan"),
            dense: DensePlan::new(dense_w, n, cfg, params).expect("valid plan"),
            sparse_act: ActivationLayout::from_kn(&act, k, n, cfg.tiling.bn).expect("layout"),
            dense_act: DenseActivationLayout::from_kn(&act, k, n, cfg.tiling.bn).expect("layout"),
        }
    }

    pub fn run_sparse(&self, pool: Option<&rayon::ThreadPool>) -> Tensor {
        spmm_exec(&self.sparse, &self.sparse_act, pool).expect("plan matches layout")
    }

    pub fn run_dense(&self, pool: Option<&rayon::ThreadPool>) -> Tensor {
        dense_exec(&self.dense, &self.dense_act, pool).expect("plan matches layout")
    }
}
