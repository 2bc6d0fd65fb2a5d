//! Output epilogues fused into the integer kernels.
//!
//! An epilogue maps one S32 accumulator (bias and zero-point compensation
//! already folded in) to the stored output element. It is an [`OutputBase`]
//! followed by a chain of [`PostOp`]s, each checked against the value domain
//! produced by its predecessor when the epilogue is built.

use std::sync::Arc;

use crate::lut::LutTable;
use crate::tensor::{
    dequantize_value, quantize_value, requant_multiplier, requantize_with, DType, QuantParams, Tensor,
};

use super::dense_ops::gelu;
use super::KernelError;

/// First step applied to the accumulator.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputBase {
    /// Keep the raw S32 accumulator.
    Accumulator,
    /// `acc * scales[m]` as f32 (`scales[m] = a_scale * w_scale[m]`).
    Dequantize { scales: Arc<[f32]> },
    /// Requantize to a per-tensor 8-bit domain with per-row multipliers.
    Requantize { multipliers: Arc<[f32]>, out: QuantParams },
}

/// Fusable post-operator.
#[derive(Debug, Clone, PartialEq)]
pub enum PostOp {
    /// Per-output-channel f32 bias.
    BiasAdd(Arc<[f32]>),
    /// tanh-approximated GeLU.
    Gelu,
    /// Element-wise add of an f32 side input with the output's shape and
    /// layout, selected by slot.
    Add(usize),
    /// Per-tensor quantization of f32 data.
    Quantize(QuantParams),
    /// Dequantization of 8-bit data carrying exactly these params.
    Dequantize(QuantParams),
    /// Table lookup over 8-bit data.
    Lut(Arc<LutTable>),
}

impl PostOp {
    pub fn name(&self) -> &'static str {
        match self {
            PostOp::BiasAdd(_) => "bias_add",
            PostOp::Gelu => "gelu",
            PostOp::Add(_) => "add",
            PostOp::Quantize(_) => "quantize",
            PostOp::Dequantize(_) => "dequantize",
            PostOp::Lut(_) => "lut",
        }
    }
}

/// Value domain between epilogue steps.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Acc,
    F32,
    Int(QuantParams),
}

impl Domain {
    pub fn dtype(&self) -> DType {
        match self {
            Domain::Acc => DType::S32,
            Domain::F32 => DType::F32,
            Domain::Int(q) => q.dtype.dtype(),
        }
    }
}

/// Apply one post-op to the domain it consumes, returning the produced
/// domain, or an error naming the mismatch.
pub(crate) fn step_domain(d: &Domain, op: &PostOp) -> Result<Domain, KernelError> {
    let bad = || KernelError::Epilogue(format!("{} cannot consume {:?} data", op.name(), d.dtype()));
    match (op, d) {
        (PostOp::BiasAdd(_) | PostOp::Gelu | PostOp::Add(_), Domain::F32) => Ok(Domain::F32),
        (PostOp::Quantize(q), Domain::F32) => {
            if !q.is_per_tensor() {
                return Err(KernelError::Epilogue("quantize needs per-tensor params".into()));
            }
            Ok(Domain::Int(q.clone()))
        }
        (PostOp::Dequantize(q), Domain::Int(have)) => {
            if q != have {
                return Err(KernelError::Epilogue(format!("dequantize params {q:?} differ from data params {have:?}")));
            }
            Ok(Domain::F32)
        }
        (PostOp::Lut(t), Domain::Int(have)) => {
            if t.in_params() != have {
                return Err(KernelError::Epilogue("lut key params differ from data params".into()));
            }
            Ok(Domain::Int(t.out_params().clone()))
        }
        _ => Err(bad()),
    }
}

/// Intermediate epilogue value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    I(i32),
    F(f32),
}

impl Scalar {
    #[inline]
    fn int(self) -> i32 {
        match self {
            Scalar::I(v) => v,
            Scalar::F(_) => unreachable!("domain checked at build time"),
        }
    }

    #[inline]
    fn float(self) -> f32 {
        match self {
            Scalar::F(v) => v,
            Scalar::I(_) => unreachable!("domain checked at build time"),
        }
    }
}

/// A validated base plus post-op chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Epilogue {
    base: OutputBase,
    ops: Vec<PostOp>,
    domain: Domain,
}

impl Epilogue {
    pub fn accumulator() -> Self {
        Self { base: OutputBase::Accumulator, ops: Vec::new(), domain: Domain::Acc }
    }

    /// F32 output: `acc * a_scale * w_scales[m]`.
    pub fn dequantize(a_scale: f32, w_scales: &[f32]) -> Result<Self, KernelError> {
        check_scales(a_scale, w_scales)?;
        let scales: Arc<[f32]> = w_scales.iter().map(|w| a_scale * w).collect();
        Ok(Self { base: OutputBase::Dequantize { scales }, ops: Vec::new(), domain: Domain::F32 })
    }

    /// 8-bit output requantized from `in_scale = a_scale * w_scales[m]`.
    pub fn requantize(a_scale: f32, w_scales: &[f32], out: QuantParams) -> Result<Self, KernelError> {
        check_scales(a_scale, w_scales)?;
        out.validate()?;
        if !out.is_per_tensor() {
            return Err(KernelError::Epilogue("requantize output must be per-tensor".into()));
        }
        let multipliers: Arc<[f32]> = w_scales.iter().map(|w| requant_multiplier(a_scale * w, out.scale())).collect();
        Ok(Self {
            base: OutputBase::Requantize { multipliers, out: out.clone() },
            ops: Vec::new(),
            domain: Domain::Int(out),
        })
    }

    /// Append a post-op, checking it accepts the current domain.
    pub fn then(mut self, op: PostOp) -> Result<Self, KernelError> {
        self.domain = step_domain(&self.domain, &op)?;
        self.ops.push(op);
        Ok(self)
    }

    pub fn base(&self) -> &OutputBase {
        &self.base
    }

    pub fn ops(&self) -> &[PostOp] {
        &self.ops
    }

    /// Domain of the stored value.
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn out_dtype(&self) -> DType {
        self.domain.dtype()
    }

    /// Quantization of the stored value, when it is 8-bit.
    pub fn out_quant(&self) -> Option<&QuantParams> {
        match &self.domain {
            Domain::Int(q) => Some(q),
            _ => None,
        }
    }

    /// Number of side-input slots referenced by the chain.
    pub fn num_sides(&self) -> usize {
        self.ops
            .iter()
            .filter_map(|op| match op {
                PostOp::Add(s) => Some(s + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Check per-row vectors cover `rows` output channels.
    pub fn check_rows(&self, rows: usize) -> Result<(), KernelError> {
        let mut lens = Vec::new();
        match &self.base {
            OutputBase::Accumulator => {}
            OutputBase::Dequantize { scales } => lens.push(scales.len()),
            OutputBase::Requantize { multipliers, .. } => lens.push(multipliers.len()),
        }
        lens.extend(self.ops.iter().filter_map(|op| match op {
            PostOp::BiasAdd(b) => Some(b.len()),
            _ => None,
        }));
        match lens.into_iter().find(|&l| l != rows) {
            Some(l) => Err(KernelError::Epilogue(format!("per-channel vector of {l} entries for {rows} rows"))),
            None => Ok(()),
        }
    }

    /// Evaluate for accumulator `acc` of output row `m`; `idx` is the flat
    /// output index used to read side inputs.
    #[inline]
    pub fn eval(&self, acc: i32, m: usize, idx: usize, sides: &[&[f32]]) -> Scalar {
        let mut v = match &self.base {
            OutputBase::Accumulator => Scalar::I(acc),
            OutputBase::Dequantize { scales } => Scalar::F(acc as f32 * scales[m]),
            OutputBase::Requantize { multipliers, out } => {
                Scalar::I(requantize_with(acc, multipliers[m], out.zero_point(), out.dtype))
            }
        };
        for op in &self.ops {
            v = match op {
                PostOp::BiasAdd(b) => Scalar::F(v.float() + b[m]),
                PostOp::Gelu => Scalar::F(gelu(v.float())),
                PostOp::Add(s) => Scalar::F(v.float() + sides[*s][idx]),
                PostOp::Quantize(q) => Scalar::I(quantize_value(v.float(), q.scale(), q.zero_point(), q.dtype)),
                PostOp::Dequantize(q) => Scalar::F(dequantize_value(v.int(), q.scale(), q.zero_point())),
                PostOp::Lut(t) => Scalar::I(t.lookup(v.int())),
            };
        }
        v
    }

    /// Which vectorized store path applies, if any.
    pub(crate) fn fast_path(&self) -> FastPath {
        match (&self.base, &self.ops[..]) {
            (OutputBase::Accumulator, []) => FastPath::Copy,
            (OutputBase::Dequantize { .. }, []) => FastPath::Dequantize(None),
            (OutputBase::Dequantize { .. }, [PostOp::Add(s)]) => FastPath::Dequantize(Some(*s)),
            (OutputBase::Requantize { .. }, []) => FastPath::Requantize { lut: false },
            (OutputBase::Requantize { .. }, [PostOp::Lut(_)]) => FastPath::Requantize { lut: true },
            _ => FastPath::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FastPath {
    None,
    Copy,
    /// Optionally followed by an add of the given side input.
    Dequantize(Option<usize>),
    /// Optionally followed by a table lookup.
    Requantize {
        lut: bool,
    },
}

fn check_scales(a_scale: f32, w_scales: &[f32]) -> Result<(), KernelError> {
    if !(a_scale.is_finite() && a_scale > 0.0) || w_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(KernelError::Epilogue("scales must be positive and finite".into()));
    }
    Ok(())
}

/// How `[M x N]` results are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputLayout {
    /// `out[m * N + n]`.
    #[default]
    RowMajor,
    /// Token-major `out[n * M + m]`.
    Transposed,
}

impl OutputLayout {
    #[inline]
    pub fn index(self, m: usize, n: usize, rows: usize, cols: usize) -> usize {
        match self {
            OutputLayout::RowMajor => m * cols + n,
            OutputLayout::Transposed => n * rows + m,
        }
    }
}

/// Borrowed destination buffer, typed by the epilogue's output dtype.
#[derive(Debug)]
pub enum OutputMut<'a> {
    U8(&'a mut [u8]),
    S8(&'a mut [i8]),
    S32(&'a mut [i32]),
    F32(&'a mut [f32]),
}

impl<'a> OutputMut<'a> {
    pub fn from_tensor(t: &'a mut Tensor) -> Self {
        match t.dtype() {
            DType::U8 => OutputMut::U8(t.as_u8_mut().expect("dtype matched")),
            DType::S8 => OutputMut::S8(t.as_s8_mut().expect("dtype matched")),
            DType::S32 => OutputMut::S32(t.as_s32_mut().expect("dtype matched")),
            DType::F32 => OutputMut::F32(t.as_f32_mut().expect("dtype matched")),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            OutputMut::U8(_) => DType::U8,
            OutputMut::S8(_) => DType::S8,
            OutputMut::S32(_) => DType::S32,
            OutputMut::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            OutputMut::U8(b) => b.len(),
            OutputMut::S8(b) => b.len(),
            OutputMut::S32(b) => b.len(),
            OutputMut::F32(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn as_mut_ptr(&mut self) -> *mut u8 {
        match self {
            OutputMut::U8(b) => b.as_mut_ptr(),
            OutputMut::S8(b) => b.as_mut_ptr().cast(),
            OutputMut::S32(b) => b.as_mut_ptr().cast(),
            OutputMut::F32(b) => b.as_mut_ptr().cast(),
        }
    }
}

/// Type-erased output pointer shared by worker tasks that write disjoint
/// tiles.
#[derive(Clone, Copy)]
pub(crate) struct RawOutput {
    ptr: *mut u8,
    dtype: DType,
    pub(crate) layout: OutputLayout,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
}

// SAFETY: tasks only write disjoint element ranges (one tile per cell, every
// cell owned by exactly one task) and the buffer outlives the parallel scope.
unsafe impl Send for RawOutput {}
unsafe impl Sync for RawOutput {}

impl RawOutput {
    pub(crate) fn new(
        out: &mut OutputMut<'_>,
        epi: &Epilogue,
        layout: OutputLayout,
        rows: usize,
        cols: usize,
    ) -> Result<Self, KernelError> {
        if out.dtype() != epi.out_dtype() {
            return Err(KernelError::Epilogue(format!(
                "output buffer is {:?} but epilogue produces {:?}",
                out.dtype(),
                epi.out_dtype()
            )));
        }
        if out.len() != rows * cols {
            return Err(KernelError::Shape(format!("output buffer {} != {rows}x{cols}", out.len())));
        }
        Ok(Self { ptr: out.as_mut_ptr(), dtype: out.dtype(), layout, rows, cols })
    }

    pub(crate) fn dtype(&self) -> DType {
        self.dtype
    }

    pub(crate) fn ptr(&self) -> *mut u8 {
        self.ptr
    }

    /// Write one element. Caller guarantees `idx < rows * cols` and that
    /// no other task writes `idx`.
    #[inline]
    pub(crate) unsafe fn write(&self, idx: usize, v: Scalar) {
        unsafe {
            match (self.dtype, v) {
                (DType::U8, Scalar::I(x)) => *self.ptr.add(idx) = x as u8,
                (DType::S8, Scalar::I(x)) => *self.ptr.cast::<i8>().add(idx) = x as i8,
                (DType::S32, Scalar::I(x)) => *self.ptr.cast::<i32>().add(idx) = x,
                (DType::F32, Scalar::F(x)) => *self.ptr.cast::<f32>().add(idx) = x,
                _ => unreachable!("dtype checked at construction"),
            }
        }
    }
}

/// Accumulator tile: up to four rows of up to 64 columns.
pub(crate) type AccTile = [[i32; 64]; 4];

/// Store context shared by every tile of one kernel call.
pub(crate) struct Store<'a> {
    pub(crate) epi: &'a Epilogue,
    pub(crate) out: RawOutput,
    pub(crate) sides: &'a [&'a [f32]],
    pub(crate) simd: bool,
    /// Stored byte for each raw requantized byte, when the chain ends in a
    /// table lookup.
    pub(crate) lut_bytes: [u8; 256],
}

impl<'a> Store<'a> {
    pub(crate) fn new(epi: &'a Epilogue, out: RawOutput, sides: &'a [&'a [f32]], simd: bool) -> Self {
        let mut lut_bytes = [0u8; 256];
        if let Some(PostOp::Lut(t)) = epi.ops.last() {
            let signed = t.in_params().dtype == crate::tensor::QuantDType::S8;
            for (b, o) in lut_bytes.iter_mut().enumerate() {
                let key = if signed { b as u8 as i8 as i32 } else { b as i32 };
                *o = t.lookup(key) as u8;
            }
        }
        Self { epi, out, sides, simd, lut_bytes }
    }

    /// Apply the epilogue to `acc[..rows][..cols]` and store it at output
    /// rows `m0..m0+rows`, columns `n0..n0+cols`.
    ///
    /// # Safety
    /// The tile must lie inside the output and belong to the calling task.
    #[inline]
    pub(crate) unsafe fn tile(&self, acc: &AccTile, m0: usize, rows: usize, n0: usize, cols: usize) {
        #[cfg(target_arch = "x86_64")]
        if self.simd && self.epi.fast_path() != FastPath::None {
            unsafe { super::vnni::store_fast(self, acc, m0, rows, n0, cols) };
            return;
        }
        unsafe { self.tile_scalar(acc, m0, rows, n0, cols) }
    }

    pub(crate) unsafe fn tile_scalar(&self, acc: &AccTile, m0: usize, rows: usize, n0: usize, cols: usize) {
        let o = &self.out;
        for (r, row) in acc.iter().enumerate().take(rows) {
            let m = m0 + r;
            for (j, &a) in row.iter().enumerate().take(cols) {
                let idx = o.layout.index(m, n0 + j, o.rows, o.cols);
                unsafe { o.write(idx, self.epi.eval(a, m, idx, self.sides)) };
            }
        }
    }
}

/// Check side inputs match the epilogue and the output size.
pub(crate) fn check_sides(epi: &Epilogue, sides: &[&[f32]], len: usize) -> Result<(), KernelError> {
    let need = epi.num_sides();
    if sides.len() < need {
        return Err(KernelError::Epilogue(format!("epilogue reads {need} side inputs, {} given", sides.len())));
    }
    if let Some(s) = sides[..need].iter().find(|s| s.len() != len) {
        return Err(KernelError::Shape(format!("side input has {} elements, output has {len}", s.len())));
    }
    Ok(())
}
