//! Scalar oracles: plain nested loops over the dense (decoded) weight.

use crate::sparse::Sparse4x1Weight;
use crate::tensor::Tensor;

use super::epilogue::{check_sides, Epilogue, OutputLayout, OutputMut, RawOutput};
use super::KernelError;

/// Reference for the sparse kernel: decode, then [`dense_ref`].
pub fn spmm_ref(
    weight: &Sparse4x1Weight,
    act: &Tensor,
    a_zp: i32,
    bias: &[i32],
    epilogue: &Epilogue,
    sides: &[&[f32]],
) -> Result<Tensor, KernelError> {
    dense_ref(&weight.decode()?, act, a_zp, bias, epilogue, sides)
}

/// `OUT[m, n] = epilogue(sum_k W[m, k] A[k, n] - a_zp * sum_k W[m, k] + bias[m])`
/// in wrapping S32 arithmetic, row-major `[M x N]`.
pub fn dense_ref(
    w: &Tensor,
    act: &Tensor,
    a_zp: i32,
    bias: &[i32],
    epilogue: &Epilogue,
    sides: &[&[f32]],
) -> Result<Tensor, KernelError> {
    let (m, k) = w.dims2()?;
    let (ka, n) = act.dims2()?;
    if k != ka {
        return Err(KernelError::Shape(format!("weight is {m}x{k} but activation is {ka}x{n}")));
    }
    if !bias.is_empty() && bias.len() != m {
        return Err(KernelError::Shape(format!("bias has {} entries for {m} rows", bias.len())));
    }
    epilogue.check_rows(m)?;
    check_sides(epilogue, sides, m * n)?;
    let wd = w.as_s8()?;
    let ad = act.as_u8()?;

    let mut acc = vec![0i32; m * n];
    for (mi, row) in acc.chunks_exact_mut(n).enumerate() {
        let wrow = &wd[mi * k..][..k];
        let mut comp = 0i32;
        for (kk, &wv) in wrow.iter().enumerate() {
            comp = comp.wrapping_add(wv as i32);
            // Zero weights contribute nothing; skipping them only saves time.
            if wv == 0 {
                continue;
            }
            for (o, &av) in row.iter_mut().zip(&ad[kk * n..][..n]) {
                *o = o.wrapping_add(wv as i32 * av as i32);
            }
        }
        let off = bias.get(mi).copied().unwrap_or(0).wrapping_sub(a_zp.wrapping_mul(comp));
        row.iter_mut().for_each(|o| *o = o.wrapping_add(off));
    }

    let mut out = Tensor::zeros([m, n], epilogue.out_dtype());
    let mut view = OutputMut::from_tensor(&mut out);
    let raw = RawOutput::new(&mut view, epilogue, OutputLayout::RowMajor, m, n)?;
    for (i, &a) in acc.iter().enumerate() {
        // SAFETY: `i < m * n` and this loop is the only writer.
        unsafe { raw.write(i, epilogue.eval(a, i / n, i, sides)) };
    }
    Ok(out)
}
