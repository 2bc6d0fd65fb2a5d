//! Blocked dense INT8 GEMM: the baseline the sparse kernel is measured
//! against. It shares tiling, partition and epilogue code with the sparse
//! path so the comparison isolates the weight format.

use std::sync::Arc;

use rayon::ThreadPool;

use crate::sparse::GROUP_ROWS;
use crate::tensor::Tensor;

use super::epilogue::{check_sides, AccTile, Epilogue, OutputMut, RawOutput, Store};
use super::layout::DenseActivationLayout;
use super::plan::{group_rows, partition, row_offsets, LinearParams, SpmmConfig, Task};
use super::spmm::{output_shape, run_tasks};
use super::{Backend, KernelError};

/// Dense S8 weight padded to `[ceil4(M) x ceil4(K)]` with zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedDenseWeight {
    rows: usize,
    cols: usize,
    k_pad: usize,
    data: Vec<i8>,
}

impl PackedDenseWeight {
    pub fn pack(w: &Tensor) -> Result<Self, KernelError> {
        let (rows, cols) = w.dims2()?;
        if rows == 0 || cols == 0 {
            return Err(KernelError::Shape(format!("empty weight {rows}x{cols}")));
        }
        let src = w.as_s8()?;
        let k_pad = cols.div_ceil(4) * 4;
        let m_pad = rows.div_ceil(GROUP_ROWS) * GROUP_ROWS;
        let mut data = vec![0i8; m_pad * k_pad];
        for (dst, row) in data.chunks_exact_mut(k_pad).zip(src.chunks_exact(cols)) {
            dst[..cols].copy_from_slice(row);
        }
        Ok(Self { rows, cols, k_pad, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn groups(&self) -> usize {
        self.rows.div_ceil(GROUP_ROWS)
    }

    fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.k_pad..][..self.k_pad]
    }

    pub fn row_sums(&self) -> Vec<i32> {
        (0..self.rows).map(|r| self.row(r).iter().fold(0i32, |s, &v| s.wrapping_add(v as i32))).collect()
    }

    pub fn storage_bytes(&self) -> usize {
        self.data.len()
    }
}

/// Execution plan for the dense baseline.
#[derive(Debug, Clone)]
pub struct DensePlan {
    weight: Arc<PackedDenseWeight>,
    n: usize,
    config: SpmmConfig,
    params: LinearParams,
    row_offsets: Vec<i32>,
    tasks: Vec<Task>,
}

impl DensePlan {
    pub fn new(
        weight: Arc<PackedDenseWeight>,
        n: usize,
        config: SpmmConfig,
        params: LinearParams,
    ) -> Result<Self, KernelError> {
        if n == 0 {
            return Err(KernelError::Shape("N must be positive".into()));
        }
        if config.threads == 0 {
            return Err(KernelError::Config("threads must be at least 1".into()));
        }
        config.tiling.validate()?;
        if !config.backend.is_supported() {
            return Err(KernelError::Unsupported(config.backend));
        }
        let m = weight.rows();
        if !params.bias.is_empty() && params.bias.len() != m {
            return Err(KernelError::Shape(format!("bias has {} entries for {m} rows", params.bias.len())));
        }
        params.epilogue.check_rows(m)?;
        let comp = weight.row_sums();
        let row_offsets = row_offsets(&comp, &params.bias, params.a_zp, weight.groups() * GROUP_ROWS);
        // Every group costs the same: K/4 dot-product steps.
        let cost = vec![weight.k_pad / 4; weight.groups()];
        let tasks = partition(&cost, n.div_ceil(config.tiling.bn), config.threads);
        Ok(Self { weight, n, config, params, row_offsets, tasks })
    }

    pub fn m(&self) -> usize {
        self.weight.rows()
    }

    pub fn k(&self) -> usize {
        self.weight.cols()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn epilogue(&self) -> &Epilogue {
        &self.params.epilogue
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }
}

pub fn dense_exec<B: AsRef<[u8]> + Sync>(
    plan: &DensePlan,
    act: &DenseActivationLayout<B>,
    pool: Option<&ThreadPool>,
) -> Result<Tensor, KernelError> {
    let shape = output_shape(plan.config.layout, plan.m(), plan.n());
    let mut out = Tensor::zeros(shape, plan.epilogue().out_dtype());
    dense_exec_into(plan, act, &[], OutputMut::from_tensor(&mut out), pool)?;
    Ok(out)
}

pub fn dense_exec_into<B: AsRef<[u8]> + Sync>(
    plan: &DensePlan,
    act: &DenseActivationLayout<B>,
    sides: &[&[f32]],
    mut out: OutputMut<'_>,
    pool: Option<&ThreadPool>,
) -> Result<(), KernelError> {
    let (m, k, n) = (plan.m(), plan.k(), plan.n());
    let bn = plan.config.tiling.bn;
    if act.k() != k || act.n() != n || act.bn() != bn {
        return Err(KernelError::Shape(format!(
            "plan expects activation {k}x{n} (bn {bn}), got {}x{} (bn {})",
            act.k(),
            act.n(),
            act.bn()
        )));
    }
    let epi = plan.epilogue();
    check_sides(epi, sides, m * n)?;
    let raw = RawOutput::new(&mut out, epi, plan.config.layout, m, n)?;
    let store = Store::new(epi, raw, sides, plan.config.backend == Backend::Avx512Vnni);
    run_tasks(&plan.tasks, pool, |task| {
        // SAFETY: disjoint cells per task, as for the sparse kernel.
        unsafe { dense_task(plan, act, &store, task) }
    });
    Ok(())
}

unsafe fn dense_task<B: AsRef<[u8]> + Sync>(
    plan: &DensePlan,
    act: &DenseActivationLayout<B>,
    store: &Store<'_>,
    task: &Task,
) {
    let w = &*plan.weight;
    let (m, n, bn) = (w.rows, plan.n, plan.config.tiling.bn);
    let nb = plan.config.tiling.n_block;
    let k4 = w.k_pad / 4;
    let mut acc: AccTile = [[0; 64]; 4];
    for p in task.panels.clone() {
        let panel = act.panel(p);
        for c0 in (0..bn).step_by(nb) {
            let n0 = p * bn + c0;
            if n0 >= n {
                break;
            }
            let cols = nb.min(bn - c0).min(n - n0);
            let subtiles = cols.div_ceil(16);
            for g in task.groups.clone() {
                let r0 = g * GROUP_ROWS;
                let off = [
                    plan.row_offsets[r0],
                    plan.row_offsets[r0 + 1],
                    plan.row_offsets[r0 + 2],
                    plan.row_offsets[r0 + 3],
                ];
                let rows: [&[i8]; 4] = std::array::from_fn(|r| w.row(r0 + r));
                unsafe {
                    dense_tile(plan.config.backend, &panel[c0 * 4..], bn, k4, subtiles, rows, off, &mut acc);
                    store.tile(&acc, r0, group_rows(g, m), n0, cols);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
unsafe fn dense_tile(
    backend: Backend,
    panel: &[u8],
    bn: usize,
    k4: usize,
    subtiles: usize,
    rows: [&[i8]; 4],
    off: [i32; 4],
    acc: &mut AccTile,
) {
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Avx512Vnni {
        use super::vnni;
        let p = panel.as_ptr();
        let w = rows.map(|r| r.as_ptr());
        // SAFETY: backend checked at plan time; each k-quad row of the panel
        // holds at least `64 * subtiles` bytes past `p`.
        unsafe {
            match subtiles {
                4 => vnni::dense_tile::<4>(p, bn, k4, w, off, acc),
                3 => vnni::dense_tile::<3>(p, bn, k4, w, off, acc),
                2 => vnni::dense_tile::<2>(p, bn, k4, w, off, acc),
                _ => vnni::dense_tile::<1>(p, bn, k4, w, off, acc),
            }
        }
        return;
    }
    let _ = backend;
    let width = subtiles * 16;
    for (row, &o) in acc.iter_mut().zip(&off) {
        row[..width].fill(o);
    }
    for kq in 0..k4 {
        let a = &panel[kq * bn * 4..][..width * 4];
        for (r, row) in acc.iter_mut().enumerate() {
            let w = &rows[r][kq * 4..kq * 4 + 4];
            for (j, o) in row[..width].iter_mut().enumerate() {
                let q = &a[j * 4..j * 4 + 4];
                let s = w[0] as i32 * q[0] as i32
                    + w[1] as i32 * q[1] as i32
                    + w[2] as i32 * q[2] as i32
                    + w[3] as i32 * q[3] as i32;
                *o = o.wrapping_add(s);
            }
        }
    }
}

/// One-shot dense GEMM of `W [M x K]` and `A [K x N]`, row-major output.
pub fn dense_gemm_s8(
    w: &Tensor,
    act: &Tensor,
    a_zp: i32,
    bias: &[i32],
    epilogue: &Epilogue,
) -> Result<Tensor, KernelError> {
    let (k, n) = act.dims2()?;
    let packed = Arc::new(PackedDenseWeight::pack(w)?);
    if packed.cols() != k {
        return Err(KernelError::Shape(format!("weight has {} columns, activation {k} rows", packed.cols())));
    }
    let params = LinearParams { a_zp, bias: bias.to_vec(), epilogue: epilogue.clone() };
    let plan = DensePlan::new(packed, n, SpmmConfig::default(), params)?;
    let layout = DenseActivationLayout::from_kn(act.as_u8()?, k, n, plan.config.tiling.bn)?;
    dense_exec(&plan, &layout, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{dense_ref, spmm_ref, OutputLayout, Tiling};
    use crate::sparse::{generate_pattern_weight, Sparse4x1Weight};
    use crate::tensor::{DType, QuantDType, QuantParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_s8(m: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_s8([m, k], (0..m * k).map(|_| rng.random()).collect()).unwrap()
    }

    fn random_u8(k: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_u8([k, n], (0..k * n).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn equals_sparse_reference_on_same_weight() {
        let w = generate_pattern_weight(20, 37, 0.6, 4);
        let a = random_u8(37, 45, 5);
        let bias: Vec<i32> = (0..20).collect();
        let epi =
            Epilogue::requantize(0.05, &[0.02; 20], QuantParams::per_tensor(QuantDType::S8, 0.3, 0).unwrap()).unwrap();
        let s = spmm_ref(&Sparse4x1Weight::encode(&w).unwrap(), &a, 3, &bias, &epi, &[]).unwrap();
        assert_eq!(dense_gemm_s8(&w, &a, 3, &bias, &epi).unwrap(), s);
    }

    #[test]
    fn zero_activation_gives_bias() {
        let w = random_s8(6, 10, 1);
        let a = Tensor::zeros([10, 3], DType::U8);
        let bias = [5, 4, 3, 2, 1, 0];
        let y = dense_gemm_s8(&w, &a, 0, &bias, &Epilogue::accumulator()).unwrap();
        for (m, &b) in bias.iter().enumerate() {
            assert_eq!(&y.as_s32().unwrap()[m * 3..][..3], &[b; 3]);
        }
    }

    #[test]
    fn every_backend_and_layout_matches_wide_loop() {
        let (m, k, n) = (13, 70, 150);
        let w = random_s8(m, k, 2);
        let a = random_u8(k, n, 3);
        let wd = w.as_s8().unwrap();
        let ad = a.as_u8().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        for backend in Backend::available() {
            for bn in [16, 64, 96] {
                let cfg = SpmmConfig {
                    tiling: Tiling { bn, ..Tiling::default() },
                    threads: 3,
                    backend,
                    layout: OutputLayout::Transposed,
                };
                let plan = DensePlan::new(
                    Arc::new(PackedDenseWeight::pack(&w).unwrap()),
                    n,
                    cfg,
                    LinearParams { a_zp: 77, ..LinearParams::default() },
                )
                .unwrap();
                let act = DenseActivationLayout::from_kn(ad, k, n, bn).unwrap();
                let y = dense_exec(&plan, &act, Some(&pool)).unwrap();
                let y = y.as_s32().unwrap();
                for mi in 0..m {
                    for ni in 0..n {
                        let wide: i64 = (0..k).map(|kk| wd[mi * k + kk] as i64 * (ad[kk * n + ni] as i64 - 77)).sum();
                        assert_eq!(y[ni * m + mi], wide as i32);
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn matches_dense_reference(m in 1usize..30, k in 1usize..70, n in 1usize..100, zp in 0i32..256, seed in any::<u64>()) {
            let w = random_s8(m, k, seed);
            let a = random_u8(k, n, seed ^ 1);
            let epi = Epilogue::accumulator();
            prop_assert_eq!(dense_gemm_s8(&w, &a, zp, &[], &epi).unwrap(), dense_ref(&w, &a, zp, &[], &epi, &[]).unwrap());
        }
    }
}
