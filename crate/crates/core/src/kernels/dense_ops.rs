//! Dense f32 operators of the attention block and the encoder's
//! normalization/activation layers. Slice-level forms write into caller
//! buffers; tensor-level forms allocate.

use crate::tensor::{Tensor, TensorError};

use super::KernelError;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// GeLU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_f32(x: &Tensor) -> Result<Tensor, KernelError> {
    let data = x.as_f32()?.iter().map(|&v| gelu(v)).collect();
    Ok(Tensor::from_f32(x.shape().to_vec(), data)?)
}

fn last_dim(x: &Tensor) -> Result<usize, KernelError> {
    match x.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(KernelError::Shape(format!("need a non-empty last axis, got {:?}", x.shape()))),
    }
}

/// Numerically stable softmax over each `cols`-wide row, in place.
pub fn softmax_rows(data: &mut [f32], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax over the last axis.
pub fn softmax_f32(x: &Tensor) -> Result<Tensor, KernelError> {
    let cols = last_dim(x)?;
    let mut data = x.as_f32()?.to_vec();
    softmax_rows(&mut data, cols);
    Ok(Tensor::from_f32(x.shape().to_vec(), data)?)
}

/// Layer normalization of each `gamma.len()`-wide row of `src` into `dst`.
pub fn layer_norm_rows(src: &[f32], dst: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let cols = gamma.len();
    for (x, y) in src.chunks_exact(cols).zip(dst.chunks_exact_mut(cols)) {
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (((o, &v), &g), &b) in y.iter_mut().zip(x).zip(gamma).zip(beta) {
            *o = ((v as f64 - mean) * inv) as f32 * g + b;
        }
    }
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm_f32(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor, KernelError> {
    let cols = last_dim(x)?;
    if gamma.len() != cols || beta.len() != cols {
        return Err(KernelError::Shape(format!(
            "layer_norm over {cols} features with gamma {} and beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let src = x.as_f32()?;
    let mut out = vec![0.0; src.len()];
    layer_norm_rows(src, &mut out, gamma, beta, eps);
    Ok(Tensor::from_f32(x.shape().to_vec(), out)?)
}

/// Dimensions of a batched product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BmmDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is stored `[n x k]` per batch.
    pub transpose_b: bool,
}

const NR: usize = 16;
const KC: usize = 64;

/// `out[..r] += a[..r] x panel` for an `r x kc` block of `a` and a packed
/// `kc x NR` panel. Each output sums its products in `k` order.
#[inline(always)]
fn micro<const R: usize>(a: &[f32], k: usize, panel: &[[f32; NR]; KC], kc: usize, out: &mut [f32], n: usize, w: usize) {
    let mut acc = [[0f32; NR]; R];
    for (r, acc) in acc.iter_mut().enumerate() {
        acc[..w].copy_from_slice(&out[r * n..][..w]);
    }
    for (kk, p) in panel[..kc].iter().enumerate() {
        for (r, acc) in acc.iter_mut().enumerate() {
            let x = a[r * k + kk];
            for l in 0..NR {
                acc[l] += x * p[l];
            }
        }
    }
    for (r, acc) in acc.iter().enumerate() {
        out[r * n..][..w].copy_from_slice(&acc[..w]);
    }
}

#[inline(always)]
fn matmul_one(a: &[f32], b: &[f32], out: &mut [f32], d: BmmDims, alpha: f32) {
    let (m, k, n, transpose_b) = (d.m, d.k, d.n, d.transpose_b);
    out.fill(0.0);
    let mut panel = [[0f32; NR]; KC];
    for j0 in (0..n).step_by(NR) {
        let w = NR.min(n - j0);
        for k0 in (0..k).step_by(KC) {
            let kc = KC.min(k - k0);
            for (kk, p) in panel[..kc].iter_mut().enumerate() {
                for (l, v) in p[..w].iter_mut().enumerate() {
                    *v = if transpose_b { b[(j0 + l) * k + k0 + kk] } else { b[(k0 + kk) * n + j0 + l] };
                }
                p[w..].fill(0.0);
            }
            let mut i = 0;
            while i + 4 <= m {
                micro::<4>(&a[i * k + k0..], k, &panel, kc, &mut out[i * n + j0..], n, w);
                i += 4;
            }
            while i < m {
                micro::<1>(&a[i * k + k0..], k, &panel, kc, &mut out[i * n + j0..], n, w);
                i += 1;
            }
        }
    }
    out.iter_mut().for_each(|o| *o *= alpha);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn matmul_one_avx2(a: &[f32], b: &[f32], out: &mut [f32], d: BmmDims, alpha: f32) {
    matmul_one(a, b, out, d, alpha)
}

/// `out[b] = alpha * a[b] x op(b[b])` over slices. Every output is a plain
/// `k`-ordered sum, so the result does not depend on the instruction set.
pub fn batch_matmul_rows(a: &[f32], b: &[f32], out: &mut [f32], d: BmmDims, alpha: f32) {
    let (m, k, n) = (d.m, d.k, d.n);
    #[cfg(target_arch = "x86_64")]
    let wide = std::arch::is_x86_feature_detected!("avx2");
    for bi in 0..d.batch {
        let a = &a[bi * m * k..][..m * k];
        let b = &b[bi * k * n..][..k * n];
        let out = &mut out[bi * m * n..][..m * n];
        #[cfg(target_arch = "x86_64")]
        if wide {
            // SAFETY: avx2 support was detected at runtime.
            unsafe { matmul_one_avx2(a, b, out, d, alpha) };
            continue;
        }
        matmul_one(a, b, out, d, alpha);
    }
}

/// Shape of a batched product of `a [.., M, K]` and `b [.., K, N]` (or
/// `[.., N, K]` with `transpose_b`); leading axes must agree.
pub fn bmm_dims(a: &[usize], b: &[usize], transpose_b: bool) -> Result<(BmmDims, Vec<usize>), KernelError> {
    let err = || KernelError::Shape(format!("batch_matmul {a:?} x {b:?} (transpose_b={transpose_b})"));
    if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    let r = a.len();
    let (m, k) = (a[r - 2], a[r - 1]);
    let (kb, n) = if transpose_b { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
    if k != kb {
        return Err(err());
    }
    let batch = a[..r - 2].iter().product();
    let mut shape = a[..r - 2].to_vec();
    shape.extend([m, n]);
    Ok((BmmDims { batch, m, k, n, transpose_b }, shape))
}

pub fn batch_matmul_f32(a: &Tensor, b: &Tensor, transpose_b: bool, alpha: f32) -> Result<Tensor, KernelError> {
    let (d, shape) = bmm_dims(a.shape(), b.shape(), transpose_b)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    batch_matmul_rows(a.as_f32()?, b.as_f32()?, &mut out, d, alpha);
    Tensor::from_f32(shape, out).map_err(|e: TensorError| e.into())
}
