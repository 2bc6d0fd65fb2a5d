//! Activation relayouts consumed by the integer kernels.

use super::KernelError;

fn check_bn(bn: usize) -> Result<(), KernelError> {
    if bn == 0 || !bn.is_multiple_of(16) {
        return Err(KernelError::Config(format!("panel width {bn} must be a positive multiple of 16")));
    }
    Ok(())
}

/// `[K x N]` activations re-laid as `[NUM_BN][K][BN]` panels so the sparse
/// kernel can gather whole rows of a panel by column index. Columns past `N`
/// in the last panel are zero.
#[derive(Debug, Clone)]
pub struct ActivationLayout<B = Vec<u8>> {
    k: usize,
    n: usize,
    bn: usize,
    data: B,
}

impl ActivationLayout<Vec<u8>> {
    /// Relayout from row-major `[K x N]`.
    pub fn from_kn(src: &[u8], k: usize, n: usize, bn: usize) -> Result<Self, KernelError> {
        let mut data = vec![0u8; Self::required_len(k, n, bn)?];
        ActivationLayout::pack_kn(src, k, n, bn, &mut data[..])?;
        Ok(Self { k, n, bn, data })
    }

    /// Relayout from token-major `[N x K]` (the transpose).
    pub fn from_nk(src: &[u8], n: usize, k: usize, bn: usize) -> Result<Self, KernelError> {
        let mut data = vec![0u8; Self::required_len(k, n, bn)?];
        ActivationLayout::pack_nk(src, n, k, bn, &mut data[..])?;
        Ok(Self { k, n, bn, data })
    }
}

impl<'a> ActivationLayout<&'a mut [u8]> {
    pub fn pack_kn(src: &[u8], k: usize, n: usize, bn: usize, dst: &'a mut [u8]) -> Result<Self, KernelError> {
        let len = Self::required_len(k, n, bn)?;
        if src.len() != k * n {
            return Err(KernelError::Shape(format!("activation has {} elements, expected {k}x{n}", src.len())));
        }
        if dst.len() < len {
            return Err(KernelError::Shape(format!("relayout buffer {} < {len}", dst.len())));
        }
        let dst = &mut dst[..len];
        for p in 0..n.div_ceil(bn) {
            let n0 = p * bn;
            let w = bn.min(n - n0);
            for kk in 0..k {
                let out = &mut dst[(p * k + kk) * bn..][..bn];
                out[..w].copy_from_slice(&src[kk * n + n0..][..w]);
                out[w..].fill(0);
            }
        }
        Ok(Self { k, n, bn, data: dst })
    }

    pub fn pack_nk(src: &[u8], n: usize, k: usize, bn: usize, dst: &'a mut [u8]) -> Result<Self, KernelError> {
        let len = Self::required_len(k, n, bn)?;
        if src.len() != k * n {
            return Err(KernelError::Shape(format!("activation has {} elements, expected {n}x{k}", src.len())));
        }
        if dst.len() < len {
            return Err(KernelError::Shape(format!("relayout buffer {} < {len}", dst.len())));
        }
        let dst = &mut dst[..len];
        for p in 0..n.div_ceil(bn) {
            let n0 = p * bn;
            let w = bn.min(n - n0);
            let panel = &mut dst[p * k * bn..][..k * bn];
            if w < bn {
                panel.fill(0);
            }
            for j in 0..w {
                let row = &src[(n0 + j) * k..][..k];
                for (kk, &v) in row.iter().enumerate() {
                    panel[kk * bn + j] = v;
                }
            }
        }
        Ok(Self { k, n, bn, data: dst })
    }
}

impl<B> ActivationLayout<B> {
    pub fn required_len(k: usize, n: usize, bn: usize) -> Result<usize, KernelError> {
        check_bn(bn)?;
        if k == 0 || n == 0 {
            return Err(KernelError::Shape(format!("empty activation {k}x{n}")));
        }
        Ok(n.div_ceil(bn) * k * bn)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bn(&self) -> usize {
        self.bn
    }

    pub fn num_bn(&self) -> usize {
        self.n.div_ceil(self.bn)
    }
}

impl<B: AsRef<[u8]>> ActivationLayout<B> {
    pub fn as_bytes(&self) -> &[u8] {
        self.data.as_ref()
    }

    /// Panel `p` as `[K][BN]`.
    pub fn panel(&self, p: usize) -> &[u8] {
        &self.data.as_ref()[p * self.k * self.bn..][..self.k * self.bn]
    }

    /// Element `(k, n)` of the source matrix.
    pub fn get(&self, k: usize, n: usize) -> u8 {
        self.panel(n / self.bn)[k * self.bn + n % self.bn]
    }
}

/// `[K x N]` activations packed as `[NUM_BN][K/4][BN][4]`: every 16 columns
/// of a k-quad form one 64-byte VNNI operand. K is zero-padded to a multiple
/// of four and N to a multiple of `BN`.
#[derive(Debug, Clone)]
pub struct DenseActivationLayout<B = Vec<u8>> {
    k: usize,
    n: usize,
    bn: usize,
    data: B,
}

impl DenseActivationLayout<Vec<u8>> {
    pub fn from_kn(src: &[u8], k: usize, n: usize, bn: usize) -> Result<Self, KernelError> {
        let mut data = vec![0u8; Self::required_len(k, n, bn)?];
        DenseActivationLayout::pack_kn(src, k, n, bn, &mut data[..])?;
        Ok(Self { k, n, bn, data })
    }

    pub fn from_nk(src: &[u8], n: usize, k: usize, bn: usize) -> Result<Self, KernelError> {
        let mut data = vec![0u8; Self::required_len(k, n, bn)?];
        DenseActivationLayout::pack_nk(src, n, k, bn, &mut data[..])?;
        Ok(Self { k, n, bn, data })
    }
}

impl<'a> DenseActivationLayout<&'a mut [u8]> {
    pub fn pack_kn(src: &[u8], k: usize, n: usize, bn: usize, dst: &'a mut [u8]) -> Result<Self, KernelError> {
        let len = Self::required_len(k, n, bn)?;
        if src.len() != k * n {
            return Err(KernelError::Shape(format!("activation has {} elements, expected {k}x{n}", src.len())));
        }
        if dst.len() < len {
            return Err(KernelError::Shape(format!("relayout buffer {} < {len}", dst.len())));
        }
        let dst = &mut dst[..len];
        let k4 = k.div_ceil(4);
        let zero = vec![0u8; n];
        for p in 0..n.div_ceil(bn) {
            let n0 = p * bn;
            let w = bn.min(n - n0);
            for kq in 0..k4 {
                let row = |i: usize| {
                    let kk = kq * 4 + i;
                    if kk < k {
                        &src[kk * n + n0..][..w]
                    } else {
                        &zero[..w]
                    }
                };
                let (r0, r1, r2, r3) = (row(0), row(1), row(2), row(3));
                let out = &mut dst[(p * k4 + kq) * bn * 4..][..bn * 4];
                for (j, quad) in out[..w * 4].chunks_exact_mut(4).enumerate() {
                    quad.copy_from_slice(&[r0[j], r1[j], r2[j], r3[j]]);
                }
                out[w * 4..].fill(0);
            }
        }
        Ok(Self { k, n, bn, data: dst })
    }

    pub fn pack_nk(src: &[u8], n: usize, k: usize, bn: usize, dst: &'a mut [u8]) -> Result<Self, KernelError> {
        let len = Self::required_len(k, n, bn)?;
        if src.len() != k * n {
            return Err(KernelError::Shape(format!("activation has {} elements, expected {n}x{k}", src.len())));
        }
        if dst.len() < len {
            return Err(KernelError::Shape(format!("relayout buffer {} < {len}", dst.len())));
        }
        let dst = &mut dst[..len];
        let k4 = k.div_ceil(4);
        for p in 0..n.div_ceil(bn) {
            let n0 = p * bn;
            let w = bn.min(n - n0);
            let panel = &mut dst[p * k4 * bn * 4..][..k4 * bn * 4];
            if w < bn || !k.is_multiple_of(4) {
                panel.fill(0);
            }
            for j in 0..w {
                let row = &src[(n0 + j) * k..][..k];
                for (kq, quad) in row.chunks(4).enumerate() {
                    panel[(kq * bn + j) * 4..][..quad.len()].copy_from_slice(quad);
                }
            }
        }
        Ok(Self { k, n, bn, data: dst })
    }
}

impl<B> DenseActivationLayout<B> {
    pub fn required_len(k: usize, n: usize, bn: usize) -> Result<usize, KernelError> {
        check_bn(bn)?;
        if k == 0 || n == 0 {
            return Err(KernelError::Shape(format!("empty activation {k}x{n}")));
        }
        Ok(n.div_ceil(bn) * k.div_ceil(4) * bn * 4)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bn(&self) -> usize {
        self.bn
    }

    pub fn num_bn(&self) -> usize {
        self.n.div_ceil(self.bn)
    }
}

impl<B: AsRef<[u8]>> DenseActivationLayout<B> {
    /// Panel `p` as `[K/4][BN][4]`.
    pub fn panel(&self, p: usize) -> &[u8] {
        let len = self.k.div_ceil(4) * self.bn * 4;
        &self.data.as_ref()[p * len..][..len]
    }

    pub fn get(&self, k: usize, n: usize) -> u8 {
        self.panel(n / self.bn)[((k / 4) * self.bn + n % self.bn) * 4 + k % 4]
    }
}
