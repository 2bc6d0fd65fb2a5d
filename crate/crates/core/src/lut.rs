//! 8-bit lookup tables that replace a unary post-op chain with one load.
//!
//! Every key of the input domain is dequantized, pushed through the chain in
//! f32 with the same scalar operators the unfused graph uses, and quantized
//! into the output domain. S8 keys are stored at `value + 128` so the table
//! is always a flat 256-entry array.

use thiserror::Error;

use crate::kernels::dense_ops::gelu;
use crate::kernels::PostOp;
use crate::tensor::{dequantize_value, quantize_value, QuantParams, Tensor, TensorData, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LutError {
    #[error("only 8-bit tables are supported, got {0} bits")]
    BitWidth(u32),
    #[error("op `{0}` is not a unary element-wise op")]
    NonUnary(&'static str),
    #[error("op `{op}` cannot consume {domain} data")]
    Domain { op: &'static str, domain: &'static str },
    #[error("chain ends in an 8-bit domain that differs from the table's output params")]
    OutputMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutTable {
    bit_width: u32,
    in_params: QuantParams,
    out_params: QuantParams,
    values: Vec<i32>,
}

enum V {
    F(f32),
    I(i32, QuantParams),
}

fn require_per_tensor(q: &QuantParams) -> Result<(), LutError> {
    q.validate()?;
    if !q.is_per_tensor() {
        return Err(TensorError::InvalidQuant("lookup tables need per-tensor params".into()).into());
    }
    Ok(())
}

/// Evaluate `chain` on one dequantized key and quantize into `out`.
fn eval_chain(x: f32, chain: &[PostOp], out: &QuantParams) -> Result<i32, LutError> {
    let mut v = V::F(x);
    for op in chain {
        v = match (op, v) {
            (PostOp::Gelu, V::F(x)) => V::F(gelu(x)),
            (PostOp::Quantize(q), V::F(x)) => {
                require_per_tensor(q)?;
                V::I(quantize_value(x, q.scale(), q.zero_point(), q.dtype), q.clone())
            }
            (PostOp::Dequantize(q), V::I(i, have)) if *q == have => {
                V::F(dequantize_value(i, q.scale(), q.zero_point()))
            }
            (PostOp::Lut(t), V::I(i, have)) if *t.in_params() == have => V::I(t.lookup(i), t.out_params().clone()),
            (PostOp::BiasAdd(_) | PostOp::Add(_), _) => return Err(LutError::NonUnary(op.name())),
            (_, V::F(_)) => return Err(LutError::Domain { op: op.name(), domain: "f32" }),
            (_, V::I(..)) => return Err(LutError::Domain { op: op.name(), domain: "8-bit" }),
        };
    }
    match v {
        V::F(x) => Ok(quantize_value(x, out.scale(), out.zero_point(), out.dtype)),
        V::I(i, q) if q == *out => Ok(i),
        V::I(..) => Err(LutError::OutputMismatch),
    }
}

/// Build the table for `op_chain`, iterating keys from the smallest to the
/// largest value of the input dtype.
pub fn build_lut(
    bit_width: u32,
    op_chain: &[PostOp],
    in_params: &QuantParams,
    out_params: &QuantParams,
) -> Result<LutTable, LutError> {
    if bit_width != 8 {
        return Err(LutError::BitWidth(bit_width));
    }
    require_per_tensor(in_params)?;
    require_per_tensor(out_params)?;
    let (lo, hi) = (in_params.dtype.min(), in_params.dtype.max());
    let values = (lo..=hi)
        .map(|key| eval_chain(dequantize_value(key, in_params.scale(), in_params.zero_point()), op_chain, out_params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LutTable { bit_width, in_params: in_params.clone(), out_params: out_params.clone(), values })
}

/// Look up every element of `x`.
pub fn apply_lut(t: &LutTable, x: &Tensor) -> Result<Tensor, LutError> {
    let want = t.in_params.dtype.dtype();
    if x.dtype() != want {
        return Err(TensorError::DTypeMismatch { expected: want, actual: x.dtype() }.into());
    }
    let keys: Box<dyn Iterator<Item = i32>> = match x.data() {
        TensorData::U8(v) => Box::new(v.iter().map(|&b| b as i32)),
        TensorData::S8(v) => Box::new(v.iter().map(|&b| b as i32)),
        _ => unreachable!("dtype checked above"),
    };
    let data = match t.out_params.dtype {
        crate::tensor::QuantDType::U8 => TensorData::U8(keys.map(|k| t.lookup(k) as u8).collect()),
        crate::tensor::QuantDType::S8 => TensorData::S8(keys.map(|k| t.lookup(k) as i8).collect()),
    };
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

impl LutTable {
    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn in_params(&self) -> &QuantParams {
        &self.in_params
    }

    pub fn out_params(&self) -> &QuantParams {
        &self.out_params
    }

    /// Table entries, indexed by `key - min(in dtype)`.
    pub fn values(&self) -> &[i32] {
        &self.values
    }

    /// Output for an in-range input value.
    #[inline]
    pub fn lookup(&self, key: i32) -> i32 {
        self.values[(key - self.in_params.dtype.min()) as usize]
    }

    /// Slice form over raw bytes (reinterpreted per the input dtype).
    pub fn apply_bytes(&self, src: &[u8], dst: &mut [u8]) {
        let signed = self.in_params.dtype == crate::tensor::QuantDType::S8;
        for (d, &s) in dst.iter_mut().zip(src) {
            let key = if signed { s as i8 as i32 } else { s as i32 };
            *d = self.lookup(key) as u8;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::QuantDType;
    use proptest::prelude::*;

    fn q(dtype: QuantDType, scale: f32, zp: i32) -> QuantParams {
        QuantParams::per_tensor(dtype, scale, zp).unwrap()
    }

    #[test]
    fn empty_chain_with_equal_params_is_identity() {
        let p = q(QuantDType::U8, 0.1, 30);
        let t = build_lut(8, &[], &p, &p).unwrap();
        assert!(t.values().iter().enumerate().all(|(i, &v)| v == i as i32));
        let x = Tensor::from_u8([3], vec![0, 77, 255]).unwrap();
        assert_eq!(apply_lut(&t, &x).unwrap(), x);
    }

    #[test]
    fn gelu_of_zero_point_is_out_zero_point() {
        let (i, o) = (q(QuantDType::U8, 0.05, 100), q(QuantDType::U8, 0.02, 40));
        let t = build_lut(8, &[PostOp::Gelu], &i, &o).unwrap();
        assert_eq!(t.lookup(100), 40);
    }

    #[test]
    fn signed_keys_are_offset() {
        let (i, o) = (q(QuantDType::S8, 0.1, 0), q(QuantDType::S8, 0.1, 0));
        let t = build_lut(8, &[], &i, &o).unwrap();
        assert_eq!(t.values()[0], -128);
        assert_eq!(t.lookup(-1), -1);
        let x = Tensor::from_s8([2], vec![-128, 5]).unwrap();
        assert_eq!(apply_lut(&t, &x).unwrap(), x);
    }

    #[test]
    fn constant_tensor_maps_to_one_entry() {
        let (i, o) = (q(QuantDType::U8, 0.05, 10), q(QuantDType::S8, 0.03, 0));
        let t = build_lut(8, &[PostOp::Gelu], &i, &o).unwrap();
        let y = apply_lut(&t, &Tensor::from_u8([4], vec![200; 4]).unwrap()).unwrap();
        assert_eq!(y.as_s8().unwrap(), &[t.lookup(200) as i8; 4]);
    }

    #[test]
    fn rejects_bad_chains() {
        let p = q(QuantDType::U8, 0.1, 0);
        assert_eq!(build_lut(16, &[], &p, &p), Err(LutError::BitWidth(16)));
        assert_eq!(build_lut(8, &[PostOp::Add(0)], &p, &p), Err(LutError::NonUnary("add")));
        let other = q(QuantDType::U8, 0.2, 0);
        assert!(build_lut(8, &[PostOp::Quantize(other)], &p, &p).is_err());
        assert!(build_lut(8, &[PostOp::Dequantize(p.clone())], &p, &p).is_err());
    }

    proptest! {
        #[test]
        fn gelu_table_matches_per_key_evaluation(
            si in 0.001f32..0.2, zi in 0i32..256, so in 0.001f32..0.2, zo in 0i32..256,
        ) {
            let (i, o) = (q(QuantDType::U8, si, zi), q(QuantDType::U8, so, zo));
            let t = build_lut(8, &[PostOp::Gelu], &i, &o).unwrap();
            for key in 0..256 {
                let x = (key - zi) as f32 * si;
                let y = 0.5 * x * (1.0 + (0.797_884_6f32 * (x + 0.044_715 * x * x * x)).tanh());
                let want = ((y / so).round_ties_even() + zo as f32).clamp(0.0, 255.0) as i32;
                prop_assert_eq!(t.lookup(key), want);
            }
        }
    }
}
