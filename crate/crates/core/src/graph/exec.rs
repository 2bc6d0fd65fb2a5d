//! Graph execution over a static buffer plan.
//!
//! Construction resolves every tensor to a caller input or a pooled slot,
//! builds one [`SpmmPlan`] per Linear and sizes the activation relayout
//! scratch. A run acquires all slots from the executor's [`BufferPlanner`]
//! and releases them at the end, so every run after the first is served
//! from the pool's cache without touching the heap.

use std::sync::Arc;

use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::kernels::dense_ops::gelu;
use crate::kernels::dense_ops::{batch_matmul_rows, bmm_dims, layer_norm_rows, softmax_rows, BmmDims};
use crate::kernels::{
    spmm_exec_into, ActivationLayout, Backend, LinearParams, OutputLayout, OutputMut, SpmmConfig, SpmmPlan, Tiling,
};
use crate::runtime::{plan_buffers, AlignedBuf, BufId, BufferPlan, BufferPlanner, PoolStats, Storage};
use crate::tensor::{dequantize_value, quantize_into, DType, QuantParams, Tensor};

use super::{Graph, GraphError, OpKind};

/// Most side inputs a fused Linear may read.
const MAX_SIDES: usize = 4;
const MAX_RANK: usize = 8;

/// Copy `src` (row-major, `shape`) into `dst` permuted by `perm`.
pub(crate) fn transpose_copy<T: Copy>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T]) {
    let rank = shape.len();
    assert!(rank <= MAX_RANK && perm.len() == rank && src.len() == dst.len());
    if src.is_empty() {
        return;
    }
    let mut in_stride = [0usize; MAX_RANK];
    let mut s = 1;
    for a in (0..rank).rev() {
        in_stride[a] = s;
        s *= shape[a];
    }
    // Keep the innermost axis as a contiguous run when it does not move.
    let (outer, run) = if rank > 0 && perm[rank - 1] == rank - 1 { (rank - 1, shape[rank - 1]) } else { (rank, 1) };
    let mut dims = [1usize; MAX_RANK];
    let mut strides = [0usize; MAX_RANK];
    for i in 0..outer {
        dims[i] = shape[perm[i]];
        strides[i] = in_stride[perm[i]];
    }
    let mut idx = [0usize; MAX_RANK];
    let mut off = 0usize;
    for chunk in dst.chunks_exact_mut(run) {
        chunk.copy_from_slice(&src[off..off + run]);
        for i in (0..outer).rev() {
            idx[i] += 1;
            off += strides[i];
            if idx[i] < dims[i] {
                break;
            }
            off -= strides[i] * dims[i];
            idx[i] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loc {
    Input(usize),
    Slot(usize),
}

#[derive(Debug)]
enum StepKind {
    Linear {
        plan: Box<SpmmPlan>,
        tokens: usize,
        k: usize,
    },
    BatchMatmul {
        dims: BmmDims,
        alpha: f32,
    },
    Softmax {
        cols: usize,
    },
    LayerNorm {
        gamma: Arc<[f32]>,
        beta: Arc<[f32]>,
        eps: f32,
    },
    Gelu,
    Quantize(QuantParams),
    Dequantize(QuantParams),
    BiasAdd(Arc<[f32]>),
    Sum,
    Transpose {
        shape: Vec<usize>,
        perm: Vec<usize>,
    },
    /// Output shares its input's storage.
    Alias,
}

#[derive(Debug)]
struct Step {
    kind: StepKind,
    ins: Vec<(Loc, DType)>,
    out: Loc,
    out_dtype: DType,
    len: usize,
}

/// Reusable, single-caller graph runner.
pub struct Executor {
    graph: Arc<Graph>,
    steps: Vec<Step>,
    buffers: BufferPlan,
    planner: BufferPlanner,
    slot_ids: Vec<BufId>,
    scratch_bytes: usize,
    outputs: Vec<(Loc, DType, Vec<usize>)>,
    pool: Option<ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("steps", &self.steps.len()).field("slots", &self.slot_ids.len()).finish()
    }
}

fn loc(buffers: &BufferPlan, name: &str) -> Result<Loc, GraphError> {
    match buffers.tensor_storage.get(name) {
        Some(Storage::Input(i)) => Ok(Loc::Input(*i)),
        Some(Storage::Value(v)) => Ok(Loc::Slot(buffers.slot_of[*v])),
        None => Err(GraphError::UnknownTensor(name.into())),
    }
}

impl Executor {
    /// Compile `graph` for `threads` worker threads on `backend`.
    pub fn new(graph: Arc<Graph>, threads: usize, backend: Backend) -> Result<Self, GraphError> {
        graph.validate()?;
        if threads == 0 {
            return Err(GraphError::Config("threads must be at least 1".into()));
        }
        let buffers = plan_buffers(&graph)?;
        let tiling = Tiling::default();
        let mut steps = Vec::with_capacity(graph.nodes().len());
        let mut scratch_bytes = 0;
        for node in graph.nodes() {
            let info = |n: &str| graph.tensor(n);
            let x = info(&node.inputs[0])?;
            let out = info(&node.output)?;
            let ins = node
                .inputs
                .iter()
                .map(|n| Ok((loc(&buffers, n)?, info(n)?.dtype)))
                .collect::<Result<Vec<_>, GraphError>>()?;
            let out_loc = loc(&buffers, &node.output)?;
            let aliased = ins[0].0 == out_loc;
            let kind = match &node.kind {
                _ if aliased => StepKind::Alias,
                OpKind::Linear { weight, bias, post, .. } => {
                    if post.sides.len() > MAX_SIDES {
                        return Err(GraphError::Config(format!("{} side inputs exceed {MAX_SIDES}", post.sides.len())));
                    }
                    let (k, tokens) = (weight.cols(), x.numel() / weight.cols());
                    let a_zp = x.quant.as_ref().map_or(0, |q| q.zero_point());
                    let config = SpmmConfig { tiling, threads, backend, layout: OutputLayout::Transposed };
                    let params = LinearParams { a_zp, bias: bias.to_vec(), epilogue: graph.linear_epilogue(node)? };
                    let plan = SpmmPlan::new(weight.clone(), tokens, config, params)?;
                    scratch_bytes = scratch_bytes.max(ActivationLayout::<Vec<u8>>::required_len(k, tokens, tiling.bn)?);
                    StepKind::Linear { plan: Box::new(plan), tokens, k }
                }
                OpKind::BatchMatmul { alpha, transpose_b } => {
                    let (dims, _) = bmm_dims(&x.shape, &info(&node.inputs[1])?.shape, *transpose_b)?;
                    StepKind::BatchMatmul { dims, alpha: *alpha }
                }
                OpKind::Softmax => StepKind::Softmax { cols: *x.shape.last().unwrap_or(&1) },
                OpKind::LayerNorm { gamma, beta, eps } => {
                    StepKind::LayerNorm { gamma: gamma.clone(), beta: beta.clone(), eps: *eps }
                }
                OpKind::Gelu => StepKind::Gelu,
                OpKind::Quantize(q) => StepKind::Quantize(q.clone()),
                OpKind::Dequantize(q) => StepKind::Dequantize(q.clone()),
                OpKind::BiasAdd(b) => StepKind::BiasAdd(b.clone()),
                OpKind::Sum => StepKind::Sum,
                OpKind::Reshape { .. } => unreachable!("reshapes always alias"),
                OpKind::Transpose { perm } => {
                    if perm.len() > MAX_RANK {
                        return Err(GraphError::Config(format!("rank {} exceeds {MAX_RANK}", perm.len())));
                    }
                    StepKind::Transpose { shape: x.shape.clone(), perm: perm.clone() }
                }
            };
            steps.push(Step { kind, ins, out: out_loc, out_dtype: out.dtype, len: out.numel() });
        }
        let outputs = graph
            .outputs()
            .iter()
            .map(|n| Ok((loc(&buffers, n)?, graph.tensor(n)?.dtype, graph.tensor(n)?.shape.clone())))
            .collect::<Result<_, GraphError>>()?;
        let pool = if threads > 1 {
            Some(ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| GraphError::Config(e.to_string()))?)
        } else {
            None
        };
        let slot_ids = vec![BufId::default(); buffers.slot_bytes.len() + 1];
        Ok(Self { graph, steps, buffers, planner: BufferPlanner::new(), slot_ids, scratch_bytes, outputs, pool })
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn buffer_plan(&self) -> &BufferPlan {
        &self.buffers
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.planner.stats()
    }

    /// Kernel plans of the Linear nodes, in schedule order.
    pub fn linear_plans(&self) -> impl Iterator<Item = &SpmmPlan> {
        self.steps.iter().filter_map(|s| match &s.kind {
            StepKind::Linear { plan, .. } => Some(&**plan),
            _ => None,
        })
    }

    pub fn linear_plans_mut(&mut self) -> impl Iterator<Item = &mut SpmmPlan> {
        self.steps.iter_mut().filter_map(|s| match &mut s.kind {
            StepKind::Linear { plan, .. } => Some(&mut **plan),
            _ => None,
        })
    }

    /// Zeroed tensors matching the graph outputs.
    pub fn alloc_outputs(&self) -> Vec<Tensor> {
        self.outputs.iter().map(|(_, dt, shape)| Tensor::zeros(shape.clone(), *dt)).collect()
    }

    pub fn run(&mut self, inputs: &[&Tensor]) -> Result<Vec<Tensor>, GraphError> {
        let mut out = self.alloc_outputs();
        self.run_into(inputs, &mut out)?;
        Ok(out)
    }

    /// Run with inputs in graph-input order, writing into `outputs` (from
    /// [`alloc_outputs`](Self::alloc_outputs)).
    pub fn run_into(&mut self, inputs: &[&Tensor], outputs: &mut [Tensor]) -> Result<(), GraphError> {
        self.check_io(inputs, outputs)?;
        let nslots = self.buffers.slot_bytes.len();
        for s in 0..nslots {
            self.slot_ids[s] = self.planner.acquire(self.buffers.slot_bytes[s]);
        }
        self.slot_ids[nslots] = self.planner.acquire(self.scratch_bytes);
        let result = self.run_steps(inputs, outputs, None);
        for &id in &self.slot_ids {
            self.planner.release(id)?;
        }
        result
    }

    /// Run once and report the wall time of every node, in execution order.
    pub fn profile(&mut self, inputs: &[&Tensor]) -> Result<Vec<(String, std::time::Duration)>, GraphError> {
        let mut outputs = self.alloc_outputs();
        self.check_io(inputs, &outputs)?;
        let nslots = self.buffers.slot_bytes.len();
        for s in 0..nslots {
            self.slot_ids[s] = self.planner.acquire(self.buffers.slot_bytes[s]);
        }
        self.slot_ids[nslots] = self.planner.acquire(self.scratch_bytes);
        let mut times = Vec::with_capacity(self.steps.len());
        let result = self.run_steps(inputs, &mut outputs, Some(&mut times));
        for &id in &self.slot_ids {
            self.planner.release(id)?;
        }
        result?;
        Ok(self.graph.nodes().iter().map(|n| n.name.clone()).zip(times).collect())
    }

    fn check_io(&self, inputs: &[&Tensor], outputs: &[Tensor]) -> Result<(), GraphError> {
        let names = self.graph.inputs();
        if inputs.len() != names.len() {
            return Err(GraphError::MissingInput(names.get(inputs.len()).cloned().unwrap_or_default()));
        }
        for (t, name) in inputs.iter().zip(names) {
            let info = self.graph.tensor(name)?;
            if t.dtype() != info.dtype || t.shape() != info.shape.as_slice() {
                return Err(GraphError::InputMismatch {
                    name: name.clone(),
                    expected: info.dtype,
                    shape: info.shape.clone(),
                    got_dtype: t.dtype(),
                    got_shape: t.shape().to_vec(),
                });
            }
        }
        let ok = outputs.len() == self.outputs.len()
            && outputs
                .iter()
                .zip(&self.outputs)
                .all(|(t, (_, dt, shape))| t.dtype() == *dt && t.shape() == shape.as_slice());
        if !ok {
            return Err(GraphError::Config("output tensors do not match the graph outputs".into()));
        }
        Ok(())
    }

    fn run_steps(
        &mut self,
        inputs: &[&Tensor],
        outputs: &mut [Tensor],
        mut times: Option<&mut Vec<std::time::Duration>>,
    ) -> Result<(), GraphError> {
        let ctx = Ctx { inputs, slots: &self.slot_ids, pool: self.pool.as_ref() };
        let scratch = self.slot_ids[self.buffers.slot_bytes.len()];
        for step in &self.steps {
            let start = std::time::Instant::now();
            ctx.step(step, &mut self.planner, scratch)?;
            if let Some(t) = times.as_deref_mut() {
                t.push(start.elapsed());
            }
        }
        for ((l, dt, _), t) in self.outputs.iter().zip(outputs.iter_mut()) {
            let len = t.numel();
            match dt {
                DType::F32 => t.as_f32_mut()?.copy_from_slice(ctx.f32s(&self.planner, *l, len)),
                DType::U8 => t.as_u8_mut()?.copy_from_slice(ctx.u8s(&self.planner, *l, len)),
                DType::S8 => t.as_s8_mut()?.copy_from_slice(ctx.i8s(&self.planner, *l, len)),
                DType::S32 => t.as_s32_mut()?.copy_from_slice(ctx.i32s(&self.planner, *l, len)),
            }
        }
        Ok(())
    }
}

/// Borrowed state of one run.
struct Ctx<'a> {
    inputs: &'a [&'a Tensor],
    slots: &'a [BufId],
    pool: Option<&'a ThreadPool>,
}

macro_rules! reader {
    ($name:ident, $t:ty, $tensor:ident, $buf:ident) => {
        fn $name<'p>(&self, planner: &'p BufferPlanner, l: Loc, len: usize) -> &'p [$t]
        where
            'a: 'p,
        {
            match l {
                Loc::Input(i) => &self.inputs[i].$tensor().expect("dtype checked at build")[..len],
                Loc::Slot(s) => planner.get(self.slots[s]).$buf(len),
            }
        }
    };
}

impl<'a> Ctx<'a> {
    reader!(f32s, f32, as_f32, as_f32);
    reader!(u8s, u8, as_u8, bytes);
    reader!(i8s, i8, as_s8, as_i8);
    reader!(i32s, i32, as_s32, as_i32);

    fn step(&self, step: &Step, planner: &mut BufferPlanner, scratch: BufId) -> Result<(), GraphError> {
        if matches!(step.kind, StepKind::Alias) {
            return Ok(());
        }
        let Loc::Slot(out_slot) = step.out else { unreachable!("only aliases write inputs") };
        let out_id = self.slots[out_slot];
        let mut out = planner.take(out_id);
        let r = self.compute(step, planner, scratch, &mut out);
        planner.restore(out_id, out);
        r
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(
        &self,
        step: &Step,
        plan: &SpmmPlan,
        tokens: usize,
        k: usize,
        planner: &BufferPlanner,
        scratch: &mut AlignedBuf,
        out: &mut AlignedBuf,
    ) -> Result<(), GraphError> {
        let len = step.len;
        let src = self.u8s(planner, step.ins[0].0, tokens * k);
        let cap = scratch.capacity();
        let act = ActivationLayout::pack_nk(src, tokens, k, plan.config().tiling.bn, scratch.bytes_mut(cap))?;
        let mut sides: [&[f32]; MAX_SIDES] = [&[]; MAX_SIDES];
        for (s, &(l, _)) in sides.iter_mut().zip(&step.ins[1..]) {
            *s = self.f32s(planner, l, len);
        }
        let dst = match step.out_dtype {
            DType::F32 => OutputMut::F32(out.as_f32_mut(len)),
            DType::U8 => OutputMut::U8(out.bytes_mut(len)),
            DType::S8 => OutputMut::S8(out.as_i8_mut(len)),
            DType::S32 => OutputMut::S32(out.as_i32_mut(len)),
        };
        spmm_exec_into(plan, &act, &sides[..step.ins.len() - 1], dst, self.pool)?;
        Ok(())
    }

    fn compute(
        &self,
        step: &Step,
        planner: &mut BufferPlanner,
        scratch: BufId,
        out: &mut AlignedBuf,
    ) -> Result<(), GraphError> {
        let len = step.len;
        let x = step.ins[0];
        if let StepKind::Linear { plan, tokens, k } = &step.kind {
            let mut buf = planner.take(scratch);
            let r = self.linear(step, plan, *tokens, *k, planner, &mut buf, out);
            planner.restore(scratch, buf);
            return r;
        }
        let planner: &BufferPlanner = planner;
        match &step.kind {
            StepKind::BatchMatmul { dims, alpha } => {
                let a = self.f32s(planner, x.0, dims.batch * dims.m * dims.k);
                let b = self.f32s(planner, step.ins[1].0, dims.batch * dims.k * dims.n);
                batch_matmul_rows(a, b, out.as_f32_mut(len), *dims, *alpha);
            }
            StepKind::Softmax { cols } => {
                let dst = out.as_f32_mut(len);
                dst.copy_from_slice(self.f32s(planner, x.0, len));
                softmax_rows(dst, *cols);
            }
            StepKind::LayerNorm { gamma, beta, eps } => {
                layer_norm_rows(self.f32s(planner, x.0, len), out.as_f32_mut(len), gamma, beta, *eps);
            }
            StepKind::Gelu => {
                for (o, &v) in out.as_f32_mut(len).iter_mut().zip(self.f32s(planner, x.0, len)) {
                    *o = gelu(v);
                }
            }
            StepKind::BiasAdd(b) => {
                let dst = out.as_f32_mut(len);
                dst.copy_from_slice(self.f32s(planner, x.0, len));
                for row in dst.chunks_exact_mut(b.len()) {
                    row.iter_mut().zip(b.iter()).for_each(|(o, v)| *o += v);
                }
            }
            StepKind::Sum => {
                let (a, b) = (self.f32s(planner, x.0, len), self.f32s(planner, step.ins[1].0, len));
                for ((o, &p), &q) in out.as_f32_mut(len).iter_mut().zip(a).zip(b) {
                    *o = p + q;
                }
            }
            StepKind::Quantize(q) => {
                let src = self.f32s(planner, x.0, len);
                quantize_into(src, out.bytes_mut(len), q.scale(), q.zero_point(), q.dtype);
            }
            StepKind::Dequantize(q) => {
                let (s, zp) = (q.scale(), q.zero_point());
                let dst = out.as_f32_mut(len);
                if x.1 == DType::S8 {
                    dst.iter_mut()
                        .zip(self.i8s(planner, x.0, len))
                        .for_each(|(o, &v)| *o = dequantize_value(v as i32, s, zp));
                } else {
                    dst.iter_mut()
                        .zip(self.u8s(planner, x.0, len))
                        .for_each(|(o, &v)| *o = dequantize_value(v as i32, s, zp));
                }
            }
            StepKind::Transpose { shape, perm } => match x.1 {
                DType::U8 => transpose_copy(self.u8s(planner, x.0, len), shape, perm, out.bytes_mut(len)),
                DType::S8 => transpose_copy(self.i8s(planner, x.0, len), shape, perm, out.as_i8_mut(len)),
                DType::S32 => transpose_copy(self.i32s(planner, x.0, len), shape, perm, out.as_i32_mut(len)),
                DType::F32 => transpose_copy(self.f32s(planner, x.0, len), shape, perm, out.as_f32_mut(len)),
            },
            StepKind::Linear { .. } | StepKind::Alias => unreachable!(),
        }
        Ok(())
    }
}

/// One-shot single-threaded execution.
pub fn execute(g: &Graph, inputs: &[&Tensor]) -> Result<Vec<Tensor>, GraphError> {
    Executor::new(Arc::new(g.clone()), 1, Backend::detect())?.run(inputs)
}
