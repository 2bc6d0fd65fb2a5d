//! AVX-512 VNNI microkernels and vectorized epilogue stores.
//!
//! Every routine here computes exactly what its portable counterpart does:
//! `vpdpbusd` is the non-saturating `u8 x s8` four-way dot product with
//! 32-bit wraparound, and the float epilogues use the same IEEE operations
//! in the same order as the scalar code.

// Register tiles are indexed arrays; range loops read better than zips here.
#![allow(clippy::needless_range_loop)]

use std::arch::x86_64::*;

use super::epilogue::{AccTile, FastPath, OutputBase, Store};
use super::OutputLayout;
use crate::tensor::DType;

#[inline(always)]
unsafe fn bcast4(p: *const i8) -> __m512i {
    unsafe { _mm512_set1_epi32(std::ptr::read_unaligned(p.cast::<i32>())) }
}

/// Full 64-column sparse tile. `panel` points at column `c0` of a
/// `[K][bn]` activation panel; `idx`/`vals` are one group's padded index
/// list and micro-tiles.
#[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
pub(crate) unsafe fn sparse_tile_64(
    panel: *const u8,
    bn: usize,
    idx: &[u32],
    vals: &[i8],
    off: [i32; 4],
    acc: &mut AccTile,
) {
    unsafe {
        // c[r][j] lane L dword i accumulates column 16L + 4j + i.
        let mut c = [[_mm512_setzero_si512(); 4]; 4];
        for r in 0..4 {
            for j in 0..4 {
                c[r][j] = _mm512_set1_epi32(off[r]);
            }
        }
        for (ch, tile) in idx.chunks_exact(4).zip(vals.chunks_exact(16)) {
            let a0 = _mm512_loadu_si512(panel.add(ch[0] as usize * bn).cast());
            let a1 = _mm512_loadu_si512(panel.add(ch[1] as usize * bn).cast());
            let a2 = _mm512_loadu_si512(panel.add(ch[2] as usize * bn).cast());
            let a3 = _mm512_loadu_si512(panel.add(ch[3] as usize * bn).cast());
            // Interleave the four gathered rows into 4-byte column quads.
            let lo01 = _mm512_unpacklo_epi8(a0, a1);
            let hi01 = _mm512_unpackhi_epi8(a0, a1);
            let lo23 = _mm512_unpacklo_epi8(a2, a3);
            let hi23 = _mm512_unpackhi_epi8(a2, a3);
            let u = [
                _mm512_unpacklo_epi16(lo01, lo23),
                _mm512_unpackhi_epi16(lo01, lo23),
                _mm512_unpacklo_epi16(hi01, hi23),
                _mm512_unpackhi_epi16(hi01, hi23),
            ];
            let tp = tile.as_ptr();
            for r in 0..4 {
                let w = bcast4(tp.add(r * 4));
                for j in 0..4 {
                    c[r][j] = _mm512_dpbusd_epi32(c[r][j], u[j], w);
                }
            }
        }
        // 4x4 transpose of 128-bit blocks restores column order.
        for r in 0..4 {
            let [x0, x1, x2, x3] = c[r];
            let t0 = _mm512_shuffle_i32x4::<0x44>(x0, x1);
            let t1 = _mm512_shuffle_i32x4::<0x44>(x2, x3);
            let t2 = _mm512_shuffle_i32x4::<0xEE>(x0, x1);
            let t3 = _mm512_shuffle_i32x4::<0xEE>(x2, x3);
            let out = acc[r].as_mut_ptr();
            _mm512_storeu_si512(out.cast(), _mm512_shuffle_i32x4::<0x88>(t0, t1));
            _mm512_storeu_si512(out.add(16).cast(), _mm512_shuffle_i32x4::<0xDD>(t0, t1));
            _mm512_storeu_si512(out.add(32).cast(), _mm512_shuffle_i32x4::<0x88>(t2, t3));
            _mm512_storeu_si512(out.add(48).cast(), _mm512_shuffle_i32x4::<0xDD>(t2, t3));
        }
    }
}

/// Sparse tile of `S` 16-column sub-tiles (`S < 4`), used for narrow panels
/// and the `N` tail.
#[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
pub(crate) unsafe fn sparse_tile_narrow<const S: usize>(
    panel: *const u8,
    bn: usize,
    idx: &[u32],
    vals: &[i8],
    off: [i32; 4],
    acc: &mut AccTile,
) {
    unsafe {
        let mut c = [[_mm512_setzero_si512(); S]; 4];
        for r in 0..4 {
            for s in 0..S {
                c[r][s] = _mm512_set1_epi32(off[r]);
            }
        }
        for (ch, tile) in idx.chunks_exact(4).zip(vals.chunks_exact(16)) {
            let rows = [
                panel.add(ch[0] as usize * bn),
                panel.add(ch[1] as usize * bn),
                panel.add(ch[2] as usize * bn),
                panel.add(ch[3] as usize * bn),
            ];
            let tp = tile.as_ptr();
            let w = [bcast4(tp), bcast4(tp.add(4)), bcast4(tp.add(8)), bcast4(tp.add(12))];
            for s in 0..S {
                let a0 = _mm_loadu_si128(rows[0].add(16 * s).cast());
                let a1 = _mm_loadu_si128(rows[1].add(16 * s).cast());
                let a2 = _mm_loadu_si128(rows[2].add(16 * s).cast());
                let a3 = _mm_loadu_si128(rows[3].add(16 * s).cast());
                let lo01 = _mm_unpacklo_epi8(a0, a1);
                let hi01 = _mm_unpackhi_epi8(a0, a1);
                let lo23 = _mm_unpacklo_epi8(a2, a3);
                let hi23 = _mm_unpackhi_epi8(a2, a3);
                let mut z = _mm512_castsi128_si512(_mm_unpacklo_epi16(lo01, lo23));
                z = _mm512_inserti32x4::<1>(z, _mm_unpackhi_epi16(lo01, lo23));
                z = _mm512_inserti32x4::<2>(z, _mm_unpacklo_epi16(hi01, hi23));
                z = _mm512_inserti32x4::<3>(z, _mm_unpackhi_epi16(hi01, hi23));
                for r in 0..4 {
                    c[r][s] = _mm512_dpbusd_epi32(c[r][s], z, w[r]);
                }
            }
        }
        for r in 0..4 {
            for s in 0..S {
                _mm512_storeu_si512(acc[r].as_mut_ptr().add(16 * s).cast(), c[r][s]);
            }
        }
    }
}

/// Dense tile of `S` 16-column sub-tiles. `panel` points at column `c0` of
/// a `[K/4][bn][4]` panel; `w` are the four packed weight rows.
#[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
pub(crate) unsafe fn dense_tile<const S: usize>(
    panel: *const u8,
    bn: usize,
    k4: usize,
    w: [*const i8; 4],
    off: [i32; 4],
    acc: &mut AccTile,
) {
    unsafe {
        let mut c = [[_mm512_setzero_si512(); S]; 4];
        for r in 0..4 {
            for s in 0..S {
                c[r][s] = _mm512_set1_epi32(off[r]);
            }
        }
        for kq in 0..k4 {
            let base = panel.add(kq * bn * 4);
            let mut a = [_mm512_setzero_si512(); S];
            for s in 0..S {
                a[s] = _mm512_loadu_si512(base.add(64 * s).cast());
            }
            for r in 0..4 {
                let wr = bcast4(w[r].add(kq * 4));
                for s in 0..S {
                    c[r][s] = _mm512_dpbusd_epi32(c[r][s], a[s], wr);
                }
            }
        }
        for r in 0..4 {
            for s in 0..S {
                _mm512_storeu_si512(acc[r].as_mut_ptr().add(16 * s).cast(), c[r][s]);
            }
        }
    }
}

#[inline(always)]
fn lane_mask(cols: usize, s: usize) -> u16 {
    let rem = cols - 16 * s;
    if rem >= 16 {
        u16::MAX
    } else {
        (1u16 << rem) - 1
    }
}

/// Vectorized epilogue for chains without post-ops.
///
/// # Safety
/// As [`Store::tile`]; additionally the CPU must support AVX-512 F/BW/VL.
#[target_feature(enable = "avx512f,avx512bw,avx512vl")]
pub(crate) unsafe fn store_fast(st: &Store<'_>, acc: &AccTile, m0: usize, rows: usize, n0: usize, cols: usize) {
    let o = &st.out;
    let subtiles = cols.div_ceil(16);
    unsafe {
        match (st.epi.fast_path(), o.layout) {
            (FastPath::Copy, OutputLayout::RowMajor) => {
                let base = o.ptr().cast::<i32>();
                for (r, row) in acc.iter().enumerate().take(rows) {
                    let dst = base.add((m0 + r) * o.cols + n0);
                    for s in 0..subtiles {
                        let v = _mm512_loadu_si512(row.as_ptr().add(16 * s).cast());
                        _mm512_mask_storeu_epi32(dst.add(16 * s), lane_mask(cols, s), v);
                    }
                }
            }
            (FastPath::Dequantize(add), layout) => {
                let OutputBase::Dequantize { scales } = st.epi.base() else { unreachable!() };
                let side = add.map(|s| st.sides[s].as_ptr());
                let mut tmp = [[0f32; 64]; 4];
                for r in 0..rows {
                    let sc = _mm512_set1_ps(scales[m0 + r]);
                    for s in 0..subtiles {
                        let v = _mm512_cvtepi32_ps(_mm512_loadu_si512(acc[r].as_ptr().add(16 * s).cast()));
                        let mut y = _mm512_mul_ps(v, sc);
                        if layout == OutputLayout::RowMajor {
                            let at = (m0 + r) * o.cols + n0 + 16 * s;
                            let mask = lane_mask(cols, s);
                            if let Some(p) = side {
                                y = _mm512_add_ps(y, _mm512_maskz_loadu_ps(mask, p.add(at)));
                            }
                            _mm512_mask_storeu_ps(o.ptr().cast::<f32>().add(at), mask, y);
                        } else {
                            _mm512_storeu_ps(tmp[r].as_mut_ptr().add(16 * s), y);
                        }
                    }
                }
                if layout == OutputLayout::Transposed {
                    let base = o.ptr().cast::<f32>();
                    for j in 0..cols {
                        let at = (n0 + j) * o.rows + m0;
                        for (r, t) in tmp.iter().enumerate().take(rows) {
                            let v = match side {
                                Some(p) => t[j] + *p.add(at + r),
                                None => t[j],
                            };
                            *base.add(at + r) = v;
                        }
                    }
                }
            }
            (FastPath::Requantize { lut }, layout) => {
                let OutputBase::Requantize { multipliers, out } = st.epi.base() else { unreachable!() };
                let zp = _mm512_set1_ps(out.zero_point() as f32);
                let lo = _mm512_set1_ps(out.dtype.min() as f32);
                let hi = _mm512_set1_ps(out.dtype.max() as f32);
                let direct = layout == OutputLayout::RowMajor && !lut;
                let mut tmp = [[0u8; 64]; 4];
                for r in 0..rows {
                    let mul = _mm512_set1_ps(multipliers[m0 + r]);
                    for s in 0..subtiles {
                        let v = _mm512_cvtepi32_ps(_mm512_loadu_si512(acc[r].as_ptr().add(16 * s).cast()));
                        let y = _mm512_roundscale_ps::<{ _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC }>(
                            _mm512_mul_ps(v, mul),
                        );
                        let y = _mm512_min_ps(_mm512_max_ps(_mm512_add_ps(y, zp), lo), hi);
                        let b = _mm512_cvtepi32_epi8(_mm512_cvttps_epi32(y));
                        if direct {
                            let dst = o.ptr().add((m0 + r) * o.cols + n0 + 16 * s);
                            _mm_mask_storeu_epi8(dst.cast(), lane_mask(cols, s), b);
                        } else {
                            _mm_storeu_si128(tmp[r].as_mut_ptr().add(16 * s).cast(), b);
                        }
                    }
                }
                if direct {
                    return;
                }
                debug_assert!(matches!(o.dtype(), DType::U8 | DType::S8));
                let map = |b: u8| if lut { st.lut_bytes[b as usize] } else { b };
                let base = o.ptr();
                match layout {
                    OutputLayout::RowMajor => {
                        for (r, t) in tmp.iter().enumerate().take(rows) {
                            let dst = base.add((m0 + r) * o.cols + n0);
                            for (j, &b) in t.iter().enumerate().take(cols) {
                                *dst.add(j) = map(b);
                            }
                        }
                    }
                    OutputLayout::Transposed => {
                        for j in 0..cols {
                            let dst = base.add((n0 + j) * o.rows + m0);
                            for (r, t) in tmp.iter().enumerate().take(rows) {
                                *dst.add(r) = map(t[j]);
                            }
                        }
                    }
                }
            }
            _ => st.tile_scalar(acc, m0, rows, n0, cols),
        }
    }
}
