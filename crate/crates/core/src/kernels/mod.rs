//! INT8 GEMM kernels: the 4x1 sparse-weight x dense-activation kernel, its
//! scalar oracle, a blocked dense baseline, and the f32 operators used by the
//! attention block.
//!
//! Integer kernels compute, per output element,
//!
//! ```text
//! acc[m, n] = sum_k W[m, k] * A[k, n]  -  a_zp * rowsum(W)[m]  +  bias[m]
//! ```
//!
//! with 32-bit wrapping arithmetic (the semantics of the non-saturating
//! `u8 x s8` dot-product instruction), then apply an [`Epilogue`].

mod dense;
pub mod dense_ops;
mod epilogue;
mod layout;
mod plan;
mod reference;
mod spmm;
#[cfg(target_arch = "x86_64")]
mod vnni;

use thiserror::Error;

use crate::sparse::FormatError;
use crate::tensor::TensorError;

pub use dense::{dense_exec, dense_gemm_s8, DensePlan, PackedDenseWeight};
pub use dense_ops::{batch_matmul_f32, gelu_f32, layer_norm_f32, softmax_f32};
pub use epilogue::{Domain, Epilogue, OutputBase, OutputLayout, OutputMut, PostOp, Scalar};
pub use layout::{ActivationLayout, DenseActivationLayout};
pub use plan::{plan_spmm, LinearParams, SpmmConfig, SpmmPlan, Task, Tiling};
pub use reference::{dense_ref, spmm_ref};
pub use spmm::{spmm_exec, spmm_exec_into};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid epilogue: {0}")]
    Epilogue(String),
    #[error("backend {0:?} is not supported on this CPU")]
    Unsupported(Backend),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Microkernel implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    /// Plain Rust loops; runs everywhere.
    Portable,
    /// AVX-512 VNNI (`vpdpbusd`) microkernels.
    Avx512Vnni,
}

impl Backend {
    /// Fastest backend available on the running CPU.
    pub fn detect() -> Self {
        if Self::Avx512Vnni.is_supported() {
            Self::Avx512Vnni
        } else {
            Self::Portable
        }
    }

    pub fn is_supported(self) -> bool {
        match self {
            Backend::Portable => true,
            #[cfg(target_arch = "x86_64")]
            Backend::Avx512Vnni => {
                std::arch::is_x86_feature_detected!("avx512f")
                    && std::arch::is_x86_feature_detected!("avx512bw")
                    && std::arch::is_x86_feature_detected!("avx512vl")
                    && std::arch::is_x86_feature_detected!("avx512vnni")
            }
            #[cfg(not(target_arch = "x86_64"))]
            Backend::Avx512Vnni => false,
        }
    }

    /// All backends usable on this machine, portable first.
    pub fn available() -> Vec<Backend> {
        [Backend::Portable, Backend::Avx512Vnni].into_iter().filter(|b| b.is_supported()).collect()
    }
}

/// One lane of the `u8 x s8` dot-product instruction: four exact products
/// summed and added to `acc` with 32-bit wraparound.
#[inline]
pub fn dot4_accum(a: [u8; 4], b: [i8; 4], acc: i32) -> i32 {
    let s: i32 = a.iter().zip(b).map(|(&x, y)| x as i32 * y as i32).sum();
    acc.wrapping_add(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dot4_examples() {
        assert_eq!(dot4_accum([1, 2, 3, 4], [1, 1, 1, 1], 0), 10);
        assert_eq!(dot4_accum([255; 4], [-128; 4], 0), -130560);
        assert_eq!(dot4_accum([255; 4], [127; 4], i32::MAX), i32::MAX.wrapping_add(129540));
    }

    proptest! {
        #[test]
        fn dot4_matches_wide_reference(a in any::<[u8; 4]>(), b in any::<[i8; 4]>(), acc in any::<i32>()) {
            let wide: i64 = acc as i64 + a.iter().zip(b).map(|(&x, y)| x as i64 * y as i64).sum::<i64>();
            prop_assert_eq!(dot4_accum(a, b, acc), wide as i32);
        }
    }
}
