//! Dense tensors and affine quantization arithmetic.
//!
//! The quantization scheme used throughout the crate:
//!
//! - activations: `U8`, per-tensor, asymmetric (`zero_point` in `[0, 255]`)
//! - weights: `S8`, per-output-channel, symmetric (`zero_point == 0`)
//! - accumulators: `S32`, wrapping
//!
//! All rounding is round-half-to-even so that scalar reference code and the
//! vectorized kernels (which use the default MXCSR rounding mode) agree
//! bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("expected dtype {expected:?}, got {actual:?}")]
    DTypeMismatch { expected: DType, actual: DType },
    #[error("expected a {expected}-D tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("tensor is empty")]
    Empty,
    #[error("invalid quantization parameters: {0}")]
    InvalidQuant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    S8,
    U8,
    S32,
}

impl DType {
    pub const fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::S32 => 4,
            DType::S8 | DType::U8 => 1,
        }
    }
}

/// Owned, typed element storage.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    S8(Vec<i8>),
    U8(Vec<u8>),
    S32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::S8(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::S32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::S8(_) => DType::S8,
            TensorData::U8(_) => DType::U8,
            TensorData::S32(_) => DType::S32,
        }
    }

    /// Little-endian byte image of the elements.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::S8(v) => v.iter().map(|&x| x as u8).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::S32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Option<Self> {
        if !bytes.len().is_multiple_of(dtype.size_of()) {
            return None;
        }
        Some(match dtype {
            DType::F32 => {
                TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
            }
            DType::S32 => {
                TensorData::S32(bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
            }
            DType::S8 => TensorData::S8(bytes.iter().map(|&b| b as i8).collect()),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        })
    }
}

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

macro_rules! typed_ctor {
    ($name:ident, $variant:ident, $t:ty) => {
        pub fn $name(shape: impl Into<Vec<usize>>, data: Vec<$t>) -> Result<Self, TensorError> {
            Self::new(shape, TensorData::$variant(data))
        }
    };
}

macro_rules! typed_view {
    ($name:ident, $name_mut:ident, $variant:ident, $t:ty) => {
        pub fn $name(&self) -> Result<&[$t], TensorError> {
            match &self.data {
                TensorData::$variant(v) => Ok(v),
                other => Err(TensorError::DTypeMismatch { expected: DType::$variant, actual: other.dtype() }),
            }
        }

        pub fn $name_mut(&mut self) -> Result<&mut [$t], TensorError> {
            match &mut self.data {
                TensorData::$variant(v) => Ok(v),
                other => Err(TensorError::DTypeMismatch { expected: DType::$variant, actual: other.dtype() }),
            }
        }
    };
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: TensorData) -> Result<Self, TensorError> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    typed_ctor!(from_f32, F32, f32);
    typed_ctor!(from_s8, S8, i8);
    typed_ctor!(from_u8, U8, u8);
    typed_ctor!(from_s32, S32, i32);

    pub fn zeros(shape: impl Into<Vec<usize>>, dtype: DType) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::S8 => TensorData::S8(vec![0; n]),
            DType::U8 => TensorData::U8(vec![0; n]),
            DType::S32 => TensorData::S32(vec![0; n]),
        };
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank { expected: 2, shape: self.shape.clone() }),
        }
    }

    typed_view!(as_f32, as_f32_mut, F32, f32);
    typed_view!(as_s8, as_s8_mut, S8, i8);
    typed_view!(as_u8, as_u8_mut, U8, u8);
    typed_view!(as_s32, as_s32_mut, S32, i32);
}

/// Signedness of a quantized integer domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantDType {
    S8,
    U8,
}

impl QuantDType {
    pub const fn min(self) -> i32 {
        match self {
            QuantDType::S8 => -128,
            QuantDType::U8 => 0,
        }
    }

    pub const fn max(self) -> i32 {
        match self {
            QuantDType::S8 => 127,
            QuantDType::U8 => 255,
        }
    }

    pub const fn dtype(self) -> DType {
        match self {
            QuantDType::S8 => DType::S8,
            QuantDType::U8 => DType::U8,
        }
    }

    pub fn from_dtype(dtype: DType) -> Option<Self> {
        match dtype {
            DType::S8 => Some(QuantDType::S8),
            DType::U8 => Some(QuantDType::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerOutputChannel,
}

/// Affine quantization parameters: `real = (q - zero_point) * scale`.
///
/// Per-tensor parameters hold one scale; per-channel parameters hold one
/// scale per row of a 2-D tensor (output channel of a weight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub dtype: QuantDType,
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
}

impl QuantParams {
    pub fn per_tensor(dtype: QuantDType, scale: f32, zero_point: i32) -> Result<Self, TensorError> {
        let q = Self { dtype, scales: vec![scale], zero_points: vec![zero_point] };
        q.validate()?;
        Ok(q)
    }

    pub fn per_channel_symmetric(scales: Vec<f32>) -> Result<Self, TensorError> {
        let zero_points = vec![0; scales.len()];
        let q = Self { dtype: QuantDType::S8, scales, zero_points };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.scales.is_empty() || self.scales.len() != self.zero_points.len() {
            return Err(TensorError::InvalidQuant(format!(
                "{} scales vs {} zero points",
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(TensorError::InvalidQuant(format!("scale {s} is not positive")));
        }
        let (lo, hi) = (self.dtype.min(), self.dtype.max());
        if let Some(z) = self.zero_points.iter().find(|z| !(lo..=hi).contains(*z)) {
            return Err(TensorError::InvalidQuant(format!("zero point {z} out of range")));
        }
        Ok(())
    }

    pub fn is_per_tensor(&self) -> bool {
        self.scales.len() == 1
    }

    /// Scale of a per-tensor parameter set (first channel otherwise).
    pub fn scale(&self) -> f32 {
        self.scales[0]
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_points[0]
    }

    pub fn channel(&self, c: usize) -> (f32, i32) {
        if self.is_per_tensor() {
            (self.scales[0], self.zero_points[0])
        } else {
            (self.scales[c], self.zero_points[c])
        }
    }
}

/// Quantize one value: `clamp(round_half_even(x / scale) + zero_point)`.
#[inline]
pub fn quantize_value(x: f32, scale: f32, zero_point: i32, dtype: QuantDType) -> i32 {
    let r = round_half_even(x / scale) + zero_point as f32;
    // Integral after rounding, so the cast is exact once clamped.
    r.clamp(dtype.min() as f32, dtype.max() as f32) as i32
}

/// `round_ties_even` without a libm call: adding 1.5 * 2^23 leaves no
/// fraction bits, so the FPU's nearest-even mode does the rounding. Inputs
/// are first clamped to +-2^22, beyond every 8-bit range, where the trick
/// is exact up to the sign of zero. NaN passes through.
#[inline(always)]
fn round_half_even(y: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0;
    const LIMIT: f32 = 4_194_304.0;
    (y.clamp(-LIMIT, LIMIT) + MAGIC) - MAGIC
}

/// Quantize `src` into raw bytes (two's complement for `S8`).
pub fn quantize_into(src: &[f32], dst: &mut [u8], scale: f32, zero_point: i32, dtype: QuantDType) {
    #[inline(always)]
    fn body(src: &[f32], dst: &mut [u8], scale: f32, zero_point: i32, dtype: QuantDType) {
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = quantize_value(v, scale, zero_point, dtype) as u8;
        }
    }
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    fn wide(src: &[f32], dst: &mut [u8], scale: f32, zero_point: i32, dtype: QuantDType) {
        body(src, dst, scale, zero_point, dtype)
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 support was detected at runtime.
        return unsafe { wide(src, dst, scale, zero_point, dtype) };
    }
    body(src, dst, scale, zero_point, dtype)
}

#[inline]
pub fn dequantize_value(q: i32, scale: f32, zero_point: i32) -> f32 {
    (q - zero_point) as f32 * scale
}

/// Min/max calibration of a float tensor.
///
/// `S8` targets are symmetric (`scale = max|x| / 127`), `U8` targets are
/// asymmetric (`scale = (max - min) / 255`, range widened to include zero).
/// An all-zero input yields `scale = 1`.
pub fn compute_quant_params(
    t: &Tensor,
    granularity: Granularity,
    target: QuantDType,
) -> Result<QuantParams, TensorError> {
    let data = t.as_f32()?;
    if data.is_empty() {
        return Err(TensorError::Empty);
    }
    let rows: Vec<&[f32]> = match granularity {
        Granularity::PerTensor => vec![data],
        Granularity::PerOutputChannel => {
            let (r, c) = t.dims2()?;
            if r == 0 || c == 0 {
                return Err(TensorError::Empty);
            }
            data.chunks_exact(c).collect()
        }
    };
    let mut scales = Vec::with_capacity(rows.len());
    let mut zero_points = Vec::with_capacity(rows.len());
    for row in rows {
        let (scale, zp) = calibrate_range(row, target);
        scales.push(scale);
        zero_points.push(zp);
    }
    let q = QuantParams { dtype: target, scales, zero_points };
    q.validate()?;
    Ok(q)
}

fn calibrate_range(values: &[f32], target: QuantDType) -> (f32, i32) {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    match target {
        QuantDType::S8 => {
            let amax = min.abs().max(max.abs());
            if amax == 0.0 {
                (1.0, 0)
            } else {
                (amax / 127.0, 0)
            }
        }
        QuantDType::U8 => {
            let (lo, hi) = (min.min(0.0), max.max(0.0));
            if hi == lo {
                return (1.0, 0);
            }
            let scale = (hi - lo) / 255.0;
            let zp = (-lo / scale).round_ties_even().clamp(0.0, 255.0) as i32;
            (scale, zp)
        }
    }
}

/// Quantize a float tensor. Per-channel parameters apply along rows of a
/// 2-D tensor.
pub fn quantize(t: &Tensor, q: &QuantParams) -> Result<Tensor, TensorError> {
    let data = t.as_f32()?;
    let cols = channel_stride(t, q)?;
    let out = match q.dtype {
        QuantDType::U8 => TensorData::U8(
            data.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let (s, z) = q.channel(i / cols);
                    quantize_value(x, s, z, q.dtype) as u8
                })
                .collect(),
        ),
        QuantDType::S8 => TensorData::S8(
            data.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let (s, z) = q.channel(i / cols);
                    quantize_value(x, s, z, q.dtype) as i8
                })
                .collect(),
        ),
    };
    Tensor::new(t.shape().to_vec(), out)
}

pub fn dequantize(t: &Tensor, q: &QuantParams) -> Result<Tensor, TensorError> {
    if t.dtype() != q.dtype.dtype() {
        return Err(TensorError::DTypeMismatch { expected: q.dtype.dtype(), actual: t.dtype() });
    }
    let cols = channel_stride(t, q)?;
    let deq = |i: usize, v: i32| {
        let (s, z) = q.channel(i / cols);
        dequantize_value(v, s, z)
    };
    let out: Vec<f32> = match t.data() {
        TensorData::U8(v) => v.iter().enumerate().map(|(i, &x)| deq(i, x as i32)).collect(),
        TensorData::S8(v) => v.iter().enumerate().map(|(i, &x)| deq(i, x as i32)).collect(),
        _ => unreachable!("dtype checked above"),
    };
    Tensor::from_f32(t.shape().to_vec(), out)
}

fn channel_stride(t: &Tensor, q: &QuantParams) -> Result<usize, TensorError> {
    if q.is_per_tensor() {
        return Ok(t.numel().max(1));
    }
    let (r, c) = t.dims2()?;
    if r != q.scales.len() {
        return Err(TensorError::InvalidQuant(format!("{} channel scales for {r} rows", q.scales.len())));
    }
    Ok(c.max(1))
}

/// Fixed-multiplier requantization of a 32-bit accumulator into an 8-bit
/// per-tensor output domain.
///
/// The multiplier `in_scale / out_scale` is formed once in f64 and rounded to
/// f32; each value is then `clamp(round_half_even(acc * multiplier) + zp)`
/// evaluated in f32.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Requantizer {
    pub multiplier: f32,
    pub zero_point: i32,
    pub dtype: QuantDType,
}

impl Requantizer {
    pub fn new(in_scale: f32, out: &QuantParams) -> Self {
        Self { multiplier: requant_multiplier(in_scale, out.scale()), zero_point: out.zero_point(), dtype: out.dtype }
    }

    #[inline]
    pub fn apply(&self, acc: i32) -> i32 {
        requantize_with(acc, self.multiplier, self.zero_point, self.dtype)
    }
}

#[inline]
pub fn requant_multiplier(in_scale: f32, out_scale: f32) -> f32 {
    (in_scale as f64 / out_scale as f64) as f32
}

#[inline]
pub fn requantize_with(acc: i32, multiplier: f32, zero_point: i32, dtype: QuantDType) -> i32 {
    let r = round_half_even(acc as f32 * multiplier) + zero_point as f32;
    r.clamp(dtype.min() as f32, dtype.max() as f32) as i32
}

/// `clamp(round_half_even(acc * in_scale / out.scale) + out.zero_point)`.
pub fn requantize(acc: i32, in_scale: f32, out: &QuantParams) -> i32 {
    Requantizer::new(in_scale, out).apply(acc)
}

#[cfg(test)]
mod tests {
    #[test]
    fn fast_rounding_matches_std() {
        for y in [0.5f32, 1.5, 2.5, -0.5, -1.5, -2.5, 0.49999997, 1e-30, -0.0, 3.7, -3.7, 4_194_303.5] {
            assert_eq!(super::round_half_even(y), y.round_ties_even(), "{y}");
        }
        assert!(super::round_half_even(f32::NAN).is_nan());
    }

    proptest::proptest! {
        #[test]
        fn fast_rounding_matches_std_in_range(y in -4_194_304.0f32..4_194_304.0) {
            proptest::prop_assert_eq!(super::round_half_even(y), y.round_ties_even());
        }
    }

    use super::*;
    use proptest::prelude::*;

    fn u8q(scale: f32, zp: i32) -> QuantParams {
        QuantParams::per_tensor(QuantDType::U8, scale, zp).unwrap()
    }

    fn s8q(scale: f32) -> QuantParams {
        QuantParams::per_tensor(QuantDType::S8, scale, 0).unwrap()
    }

    #[test]
    fn calibrate_all_zero_is_unit_scale() {
        let t = Tensor::from_f32([4], vec![0.0; 4]).unwrap();
        let q = compute_quant_params(&t, Granularity::PerTensor, QuantDType::S8).unwrap();
        assert_eq!((q.scale(), q.zero_point()), (1.0, 0));
        let q = compute_quant_params(&t, Granularity::PerTensor, QuantDType::U8).unwrap();
        assert_eq!((q.scale(), q.zero_point()), (1.0, 0));
    }

    #[test]
    fn calibrate_symmetric() {
        let t = Tensor::from_f32([3], vec![-63.5, 10.0, 63.5]).unwrap();
        let q = compute_quant_params(&t, Granularity::PerTensor, QuantDType::S8).unwrap();
        assert_eq!((q.scale(), q.zero_point()), (0.5, 0));
    }

    #[test]
    fn calibrate_asymmetric() {
        let t = Tensor::from_f32([3], vec![-1.0, 0.5, 3.0]).unwrap();
        let q = compute_quant_params(&t, Granularity::PerTensor, QuantDType::U8).unwrap();
        assert_eq!(q.scale(), 4.0 / 255.0);
        // -min/scale = 63.75 -> 64
        assert_eq!(q.zero_point(), 64);
    }

    #[test]
    fn calibrate_per_channel_is_symmetric() {
        let t = Tensor::from_f32([2, 2], vec![1.0, -2.0, 0.0, 0.0]).unwrap();
        let q = compute_quant_params(&t, Granularity::PerOutputChannel, QuantDType::S8).unwrap();
        assert_eq!(q.scales, vec![2.0 / 127.0, 1.0]);
        assert_eq!(q.zero_points, vec![0, 0]);
    }

    #[test]
    fn calibrate_rejects_empty() {
        let t = Tensor::from_f32([0], vec![]).unwrap();
        assert_eq!(compute_quant_params(&t, Granularity::PerTensor, QuantDType::U8), Err(TensorError::Empty));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.0, 0.5, 64, QuantDType::U8), 64);
        assert_eq!(quantize_value(1.0, 0.5, 0, QuantDType::S8), 2);
        assert_eq!(quantize_value(1000.0, 0.5, 0, QuantDType::S8), 127);
        assert_eq!(quantize_value(-1000.0, 0.5, 0, QuantDType::S8), -128);
        // ties go to even
        assert_eq!(quantize_value(0.25, 0.5, 0, QuantDType::S8), 0);
        assert_eq!(quantize_value(0.75, 0.5, 0, QuantDType::S8), 2);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_value(64, 0.5, 64), 0.0);
        assert_eq!(dequantize_value(-127, 0.5, 0), -63.5);
        let t = Tensor::from_u8([2], vec![64, 66]).unwrap();
        let d = dequantize(&t, &u8q(0.5, 64)).unwrap();
        assert_eq!(d.as_f32().unwrap(), &[0.0, 1.0]);
        assert!(matches!(dequantize(&t, &s8q(0.5)), Err(TensorError::DTypeMismatch { .. })));
    }

    #[test]
    fn per_channel_quantize_uses_row_scales() {
        let t = Tensor::from_f32([2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let q = QuantParams::per_channel_symmetric(vec![1.0, 0.5]).unwrap();
        let out = quantize(&t, &q).unwrap();
        assert_eq!(out.as_s8().unwrap(), &[1, 2, 2, 4]);
    }

    #[test]
    fn requantize_examples() {
        let q = u8q(0.01, 0);
        assert_eq!(requantize(0, 0.5, &u8q(0.1, 17)), 17);
        assert_eq!(requantize(100, 0.01, &q), 100);
        // f64 reference: 123456 * 2e-4 / 0.1 = 246.912 -> 247 + 10 -> clamp 255
        let reference = ((123456f64 * 2e-4 / 0.1).round() + 10.0).clamp(0.0, 255.0) as i32;
        assert_eq!(requantize(123456, 2e-4, &u8q(0.1, 10)), reference);
        assert_eq!(reference, 255);
        let reference = ((1234f64 * 2e-4 / 0.1).round() + 10.0).clamp(0.0, 255.0) as i32;
        assert_eq!(requantize(1234, 2e-4, &u8q(0.1, 10)), reference);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantParams::per_tensor(QuantDType::U8, 0.0, 0).is_err());
        assert!(QuantParams::per_tensor(QuantDType::U8, 1.0, 256).is_err());
        assert!(QuantParams::per_tensor(QuantDType::S8, -1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn grid_round_trip(q in 0i32..=255, zp in 0i32..=255, scale in 1e-4f32..10.0) {
            let x = dequantize_value(q, scale, zp);
            prop_assert_eq!(quantize_value(x, scale, zp, QuantDType::U8), q);
        }

        #[test]
        fn grid_round_trip_s8(q in -128i32..=127, scale in 1e-4f32..10.0) {
            let x = dequantize_value(q, scale, 0);
            prop_assert_eq!(quantize_value(x, scale, 0, QuantDType::S8), q);
        }

        #[test]
        fn quantize_stays_in_range(x in proptest::num::f32::ANY, scale in 1e-6f32..1e3, zp in 0i32..=255) {
            let v = quantize_value(x, scale, zp, QuantDType::U8);
            prop_assert!((0..=255).contains(&v));
            let v = quantize_value(x, scale, 0, QuantDType::S8);
            prop_assert!((-128..=127).contains(&v));
        }

        #[test]
        fn requantize_tracks_f64_reference(acc in any::<i32>(), in_scale in 1e-6f32..1e-2, out_scale in 1e-3f32..1.0, zp in 0i32..=255) {
            let out = u8q(out_scale, zp);
            let got = requantize(acc, in_scale, &out);
            let exact = acc as f64 * in_scale as f64 / out_scale as f64;
            let reference = (exact.round_ties_even() + zp as f64).clamp(0.0, 255.0) as i32;
            prop_assert!((got - reference).abs() <= 1);
            // Off the rounding boundary the two agree exactly.
            if (exact - exact.floor() - 0.5).abs() > 1e-3 * exact.abs().max(1.0) {
                prop_assert_eq!(got, reference);
            }
        }
    }
}
