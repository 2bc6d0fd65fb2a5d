//! Sparse-weight x dense-activation execution.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::sparse::GROUP_ROWS;
use crate::tensor::Tensor;

use super::epilogue::{check_sides, AccTile, OutputLayout, OutputMut, RawOutput, Store};
use super::layout::ActivationLayout;
use super::plan::{group_rows, SpmmPlan, Task};
use super::{Backend, KernelError};

/// Run `f` over every task, on `pool` when given.
pub(crate) fn run_tasks<F>(tasks: &[Task], pool: Option<&ThreadPool>, f: F)
where
    F: Fn(&Task) + Sync + Send,
{
    match pool {
        Some(pool) if tasks.len() > 1 => pool.install(|| tasks.par_iter().with_max_len(1).for_each(f)),
        _ => tasks.iter().for_each(f),
    }
}

pub(crate) fn output_shape(layout: OutputLayout, m: usize, n: usize) -> [usize; 2] {
    match layout {
        OutputLayout::RowMajor => [m, n],
        OutputLayout::Transposed => [n, m],
    }
}

/// Execute a plan into a freshly allocated output tensor (`[M x N]`, or
/// `[N x M]` for the transposed layout). Epilogues with side inputs need
/// [`spmm_exec_into`].
pub fn spmm_exec<B: AsRef<[u8]> + Sync>(
    plan: &SpmmPlan,
    act: &ActivationLayout<B>,
    pool: Option<&ThreadPool>,
) -> Result<Tensor, KernelError> {
    let shape = output_shape(plan.config.layout, plan.m(), plan.n());
    let mut out = Tensor::zeros(shape, plan.epilogue().out_dtype());
    spmm_exec_into(plan, act, &[], OutputMut::from_tensor(&mut out), pool)?;
    Ok(out)
}

/// Execute a plan into a caller-provided buffer. Performs no allocation.
pub fn spmm_exec_into<B: AsRef<[u8]> + Sync>(
    plan: &SpmmPlan,
    act: &ActivationLayout<B>,
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
    let backend = plan.config.backend;
    let store = Store::new(epi, raw, sides, backend == Backend::Avx512Vnni);
    run_tasks(&plan.tasks, pool, |task| {
        // SAFETY: the partition assigns every (group, panel) cell to exactly
        // one task, so tiles written here are disjoint from other tasks.
        unsafe { sparse_task(plan, act, &store, task) }
    });
    Ok(())
}

unsafe fn sparse_task<B: AsRef<[u8]> + Sync>(
    plan: &SpmmPlan,
    act: &ActivationLayout<B>,
    store: &Store<'_>,
    task: &Task,
) {
    let w = &*plan.weight;
    let (m, n, bn) = (w.rows(), plan.n, plan.config.tiling.bn);
    let nb = plan.config.tiling.n_block;
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
                let (idx, vals) = (w.group_indices(g), w.group_values(g));
                unsafe {
                    sparse_tile(plan.config.backend, &panel[c0..], bn, subtiles, idx, vals, off, &mut acc);
                    store.tile(&acc, r0, group_rows(g, m), n0, cols);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
unsafe fn sparse_tile(
    backend: Backend,
    panel: &[u8],
    bn: usize,
    subtiles: usize,
    idx: &[u32],
    vals: &[i8],
    off: [i32; 4],
    acc: &mut AccTile,
) {
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Avx512Vnni {
        use super::vnni;
        let p = panel.as_ptr();
        // SAFETY: backend support was checked when the plan was built; every
        // gathered row has at least `16 * subtiles` bytes past `p`.
        unsafe {
            match subtiles {
                4 => vnni::sparse_tile_64(p, bn, idx, vals, off, acc),
                3 => vnni::sparse_tile_narrow::<3>(p, bn, idx, vals, off, acc),
                2 => vnni::sparse_tile_narrow::<2>(p, bn, idx, vals, off, acc),
                _ => vnni::sparse_tile_narrow::<1>(p, bn, idx, vals, off, acc),
            }
        }
        return;
    }
    let _ = backend;
    sparse_tile_portable(panel, bn, subtiles * 16, idx, vals, off, acc);
}

/// Portable microkernel: one `dot4_accum` per output element and chunk.
fn sparse_tile_portable(
    panel: &[u8],
    bn: usize,
    width: usize,
    idx: &[u32],
    vals: &[i8],
    off: [i32; 4],
    acc: &mut AccTile,
) {
    for (row, &o) in acc.iter_mut().zip(&off) {
        row[..width].fill(o);
    }
    for (ch, tile) in idx.chunks_exact(4).zip(vals.chunks_exact(16)) {
        let a: [&[u8]; 4] = std::array::from_fn(|i| &panel[ch[i] as usize * bn..][..width]);
        for (r, row) in acc.iter_mut().enumerate() {
            let w = &tile[r * 4..r * 4 + 4];
            let (w0, w1, w2, w3) = (w[0] as i32, w[1] as i32, w[2] as i32, w[3] as i32);
            for (j, o) in row[..width].iter_mut().enumerate() {
                // Exact in i32 (|sum| <= 4 * 255 * 128); only the add wraps.
                let s = w0 * a[0][j] as i32 + w1 * a[1][j] as i32 + w2 * a[2][j] as i32 + w3 * a[3][j] as i32;
                *o = o.wrapping_add(s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{spmm_ref, Epilogue, LinearParams, SpmmConfig, Tiling};
    use crate::sparse::{generate_pattern_weight, Sparse4x1Weight};
    use crate::tensor::{QuantDType, QuantParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn activations(k: usize, n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k * n).map(|_| rng.random()).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn check(m: usize, k: usize, n: usize, ratio: f64, threads: usize, bn: usize, backend: Backend, seed: u64) {
        let w = Arc::new(Sparse4x1Weight::encode(&generate_pattern_weight(m, k, ratio, seed)).unwrap());
        let a = activations(k, n, seed.wrapping_add(1));
        let bias: Vec<i32> = (0..m as i32).map(|i| i * 37 - 500).collect();
        let out = QuantParams::per_tensor(QuantDType::U8, 0.5, 7).unwrap();
        let w_scales = vec![0.01; m];
        let at = Tensor::from_u8([k, n], a.clone()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        for epi in [
            Epilogue::accumulator(),
            Epilogue::requantize(0.1, &w_scales, out.clone()).unwrap(),
            Epilogue::dequantize(0.1, &w_scales).unwrap(),
        ] {
            let want = spmm_ref(&w, &at, 9, &bias, &epi, &[]).unwrap();
            for layout in [OutputLayout::RowMajor, OutputLayout::Transposed] {
                let cfg = SpmmConfig { tiling: Tiling { bn, ..Tiling::default() }, threads, backend, layout };
                let params = LinearParams { a_zp: 9, bias: bias.clone(), epilogue: epi.clone() };
                let plan = SpmmPlan::new(w.clone(), n, cfg, params).unwrap();
                let act = ActivationLayout::from_kn(&a, k, n, bn).unwrap();
                let got = spmm_exec(&plan, &act, Some(&pool)).unwrap();
                let got = match layout {
                    OutputLayout::RowMajor => got,
                    OutputLayout::Transposed => transpose(&got),
                };
                assert_eq!(
                    got, want,
                    "m={m} k={k} n={n} ratio={ratio} threads={threads} bn={bn} {backend:?} {layout:?}"
                );
            }
        }
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = t.dims2().unwrap();
        let mut out = Tensor::zeros([c, r], t.dtype());
        macro_rules! tr {
            ($get:ident, $get_mut:ident) => {{
                let src = t.$get().unwrap().to_vec();
                let dst = out.$get_mut().unwrap();
                for i in 0..r {
                    for j in 0..c {
                        dst[j * r + i] = src[i * c + j];
                    }
                }
            }};
        }
        match t.dtype() {
            crate::tensor::DType::U8 => tr!(as_u8, as_u8_mut),
            crate::tensor::DType::S8 => tr!(as_s8, as_s8_mut),
            crate::tensor::DType::S32 => tr!(as_s32, as_s32_mut),
            crate::tensor::DType::F32 => tr!(as_f32, as_f32_mut),
        }
        out
    }

    #[test]
    fn tail_and_odd_shapes_match_reference() {
        for backend in Backend::available() {
            check(7, 63, 50, 0.5, 1, 64, backend, 1);
            check(5, 5, 1, 0.0, 2, 64, backend, 2);
            check(64, 128, 130, 0.8, 4, 64, backend, 3);
            check(12, 33, 100, 0.3, 3, 32, backend, 4);
            check(16, 40, 200, 0.9, 4, 128, backend, 5);
        }
    }

    #[test]
    fn fused_lookup_and_residual_match_reference() {
        use crate::kernels::PostOp;
        use crate::lut::build_lut;
        for backend in Backend::available() {
            for (m, k, n) in [(7, 63, 50), (64, 128, 130), (12, 33, 100)] {
                let w = Arc::new(Sparse4x1Weight::encode(&generate_pattern_weight(m, k, 0.7, m as u64)).unwrap());
                let a = activations(k, n, 3);
                let at = Tensor::from_u8([k, n], a.clone()).unwrap();
                let scales = vec![0.01; m];
                let side =
                    Tensor::from_f32([m, n], (0..m * n).map(|i| (i % 17) as f32 * 0.25 - 2.0).collect()).unwrap();
                let mid = QuantParams::per_tensor(QuantDType::U8, 0.5, 7).unwrap();
                let out = QuantParams::per_tensor(QuantDType::S8, 0.02, -3).unwrap();
                let lut = Arc::new(build_lut(8, &[PostOp::Gelu], &mid, &out).unwrap());
                let epis = [
                    Epilogue::requantize(0.1, &scales, mid).unwrap().then(PostOp::Lut(lut)).unwrap(),
                    Epilogue::dequantize(0.1, &scales).unwrap().then(PostOp::Add(0)).unwrap(),
                ];
                for epi in epis {
                    let want = spmm_ref(&w, &at, 9, &[], &epi, &[side.as_f32().unwrap()]).unwrap();
                    for layout in [OutputLayout::RowMajor, OutputLayout::Transposed] {
                        let side_l = match layout {
                            OutputLayout::RowMajor => side.clone(),
                            OutputLayout::Transposed => transpose(&side),
                        };
                        let cfg = SpmmConfig { tiling: Tiling::default(), threads: 1, backend, layout };
                        let params = LinearParams { a_zp: 9, bias: Vec::new(), epilogue: epi.clone() };
                        let plan = SpmmPlan::new(w.clone(), n, cfg, params).unwrap();
                        let act = ActivationLayout::from_kn(&a, k, n, 64).unwrap();
                        let mut got = Tensor::zeros(output_shape(layout, m, n), epi.out_dtype());
                        let sides = [side_l.as_f32().unwrap()];
                        spmm_exec_into(&plan, &act, &sides, OutputMut::from_tensor(&mut got), None).unwrap();
                        if layout == OutputLayout::Transposed {
                            got = transpose(&got);
                        }
                        assert_eq!(got, want, "{m}x{k}x{n} {backend:?} {layout:?} {:?}", epi.ops());
                    }
                }
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let w = Arc::new(Sparse4x1Weight::encode(&generate_pattern_weight(96, 80, 0.75, 9)).unwrap());
        let a = activations(80, 200, 10);
        let act = ActivationLayout::from_kn(&a, 80, 200, 64).unwrap();
        let base = spmm_exec(&plan_for(&w, 200, 1), &act, None).unwrap();
        for threads in [2, 4, 8] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            assert_eq!(spmm_exec(&plan_for(&w, 200, threads), &act, Some(&pool)).unwrap(), base);
        }
    }

    fn plan_for(w: &Arc<Sparse4x1Weight>, n: usize, threads: usize) -> SpmmPlan {
        crate::kernels::plan_spmm(w, n, threads).unwrap()
    }

    #[test]
    fn mismatched_activation_is_rejected() {
        let w = Arc::new(Sparse4x1Weight::encode(&generate_pattern_weight(8, 16, 0.5, 1)).unwrap());
        let plan = plan_for(&w, 10, 1);
        let act = ActivationLayout::from_kn(&[0; 17 * 10], 17, 10, 64).unwrap();
        assert!(spmm_exec(&plan, &act, None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matches_reference(m in 1usize..40, k in 1usize..90, n in 1usize..140, ratio in 0.0f64..=1.0, threads in 1usize..5, seed in any::<u64>()) {
            for backend in Backend::available() {
                check(m, k, n, ratio, threads, 64, backend, seed);
            }
        }
    }
}
