//! 4x1 block-sparse weight encoding.
//!
//! A weight `W[M x K]` (output channels x input channels) is split into row
//! groups of four output channels. Within a group, column `k` is stored iff
//! any of the four entries `W[4g..4g+4, k]` is nonzero; the four values are
//! kept or dropped together. Stored columns are grouped in chunks of four and
//! each chunk's 4x4 values form one 16-byte micro-tile laid out row-major
//! (`tile[r * 4 + c] = W[4g + r, idx[c]]`), which is exactly what the VNNI
//! microkernel broadcasts per output row.
//!
//! Groups whose stored column count is not a multiple of four are padded
//! with column index 0 and zero values. Rows past `M` (when `M % 4 != 0`) are
//! zero rows inside the last group.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const GROUP_ROWS: usize = 4;
pub const CHUNK_COLS: usize = 4;
pub const TILE_BYTES: usize = GROUP_ROWS * CHUNK_COLS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("group {group}: column index {index} out of range for K={cols}")]
    IndexOutOfRange { group: usize, index: u32, cols: usize },
    #[error("group {group}: column indices not strictly increasing")]
    Unsorted { group: usize },
    #[error("group {group}: padding block carries index {index} or nonzero values")]
    DirtyPadding { group: usize, index: u32 },
    #[error("inconsistent encoding: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weight matrix in 4x1 structured-sparse form.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparse4x1Weight {
    logical_rows: usize,
    cols: usize,
    /// Real (unpadded) block count per group.
    nnz: Vec<u32>,
    /// Start of each group's padded index list; `groups + 1` entries.
    offsets: Vec<usize>,
    /// Padded column indices, a multiple of four per group.
    indices: Vec<u32>,
    /// Micro-tile values, 16 per chunk of four indices.
    values: Vec<i8>,
    /// Per-output-channel weight scales (`logical_rows` entries).
    scales: Vec<f32>,
}

#[inline]
fn padded(n: usize) -> usize {
    n.div_ceil(CHUNK_COLS) * CHUNK_COLS
}

impl Sparse4x1Weight {
    /// Encode a dense `S8 [M x K]` matrix. Any matrix is encodable; one that
    /// does not follow the 4x1 pattern simply keeps more blocks.
    pub fn encode(w: &Tensor) -> Result<Self, FormatError> {
        let (rows, cols) = w.dims2()?;
        let data = w.as_s8()?;
        if rows == 0 || cols == 0 {
            return Err(TensorError::Empty.into());
        }
        let groups = rows.div_ceil(GROUP_ROWS);
        let at = |r: usize, k: usize| if r < rows { data[r * cols + k] } else { 0 };

        let mut nnz = Vec::with_capacity(groups);
        let mut offsets = Vec::with_capacity(groups + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for g in 0..groups {
            let r0 = g * GROUP_ROWS;
            let start = indices.len();
            indices.extend((0..cols).filter(|&k| (0..GROUP_ROWS).any(|r| at(r0 + r, k) != 0)).map(|k| k as u32));
            let real = indices.len() - start;
            indices.resize(start + padded(real), 0);
            for (ci, chunk) in indices[start..].chunks_exact(CHUNK_COLS).enumerate() {
                for r in 0..GROUP_ROWS {
                    for (c, &k) in chunk.iter().enumerate() {
                        // Padding slots point at column 0 but carry zeros.
                        let live = ci * CHUNK_COLS + c < real;
                        values.push(if live { at(r0 + r, k as usize) } else { 0 });
                    }
                }
            }
            nnz.push(real as u32);
            offsets.push(indices.len());
        }
        Ok(Self { logical_rows: rows, cols, nnz, offsets, indices, values, scales: vec![1.0; rows] })
    }

    /// Assemble an encoding from stored parts, validating every invariant.
    pub fn from_parts(
        logical_rows: usize,
        cols: usize,
        nnz: Vec<u32>,
        indices: Vec<u32>,
        values: Vec<i8>,
        scales: Vec<f32>,
    ) -> Result<Self, FormatError> {
        if logical_rows == 0 || cols == 0 {
            return Err(FormatError::Inconsistent("empty shape".into()));
        }
        let groups = logical_rows.div_ceil(GROUP_ROWS);
        if nnz.len() != groups {
            return Err(FormatError::Inconsistent(format!("{} group counts for {groups} groups", nnz.len())));
        }
        if scales.len() != logical_rows {
            return Err(FormatError::Inconsistent(format!("{} scales for {logical_rows} rows", scales.len())));
        }
        let mut offsets = Vec::with_capacity(groups + 1);
        offsets.push(0usize);
        for &n in &nnz {
            if n as usize > cols {
                return Err(FormatError::Inconsistent(format!("group count {n} exceeds K={cols}")));
            }
            offsets.push(offsets.last().unwrap() + padded(n as usize));
        }
        let total = *offsets.last().unwrap();
        if indices.len() != total || values.len() != total / CHUNK_COLS * TILE_BYTES {
            return Err(FormatError::Inconsistent(format!(
                "{} indices / {} values for {total} padded blocks",
                indices.len(),
                values.len()
            )));
        }
        let w = Self { logical_rows, cols, nnz, offsets, indices, values, scales };
        w.validate()?;
        Ok(w)
    }

    /// Check index ranges, ordering, and padding cleanliness.
    pub fn validate(&self) -> Result<(), FormatError> {
        for g in 0..self.groups() {
            let (start, end) = (self.offsets[g], self.offsets[g + 1]);
            let real = self.nnz[g] as usize;
            let idx = &self.indices[start..end];
            for (i, &k) in idx.iter().enumerate() {
                if i < real {
                    if k as usize >= self.cols {
                        return Err(FormatError::IndexOutOfRange { group: g, index: k, cols: self.cols });
                    }
                    if i > 0 && idx[i - 1] >= k {
                        return Err(FormatError::Unsorted { group: g });
                    }
                } else {
                    let slot = start + i;
                    let (chunk, c) = (slot / CHUNK_COLS, slot % CHUNK_COLS);
                    let dirty = (0..GROUP_ROWS).any(|r| self.values[chunk * TILE_BYTES + r * CHUNK_COLS + c] != 0);
                    if k != 0 || dirty {
                        return Err(FormatError::DirtyPadding { group: g, index: k });
                    }
                }
            }
            // Rows past the logical end must be zero.
            let r0 = g * GROUP_ROWS;
            for r in 0..GROUP_ROWS {
                if r0 + r < self.logical_rows {
                    continue;
                }
                for chunk in start / CHUNK_COLS..end / CHUNK_COLS {
                    let row = &self.values[chunk * TILE_BYTES + r * CHUNK_COLS..][..CHUNK_COLS];
                    if row.iter().any(|&v| v != 0) {
                        return Err(FormatError::Inconsistent(format!("padding row {} holds nonzero values", r0 + r)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Attach per-output-channel scales.
    pub fn with_scales(mut self, scales: Vec<f32>) -> Result<Self, FormatError> {
        if scales.len() != self.logical_rows {
            return Err(FormatError::Inconsistent(format!("{} scales for {} rows", scales.len(), self.logical_rows)));
        }
        self.scales = scales;
        Ok(self)
    }

    /// Dense `S8 [M x K]` reconstruction, trimmed to the logical rows.
    pub fn decode(&self) -> Result<Tensor, FormatError> {
        let mut out = vec![0i8; self.logical_rows * self.cols];
        for g in 0..self.groups() {
            let (start, end) = (self.offsets[g], self.offsets[g + 1]);
            for slot in start..end {
                let k = self.indices[slot] as usize;
                if k >= self.cols {
                    return Err(FormatError::IndexOutOfRange { group: g, index: self.indices[slot], cols: self.cols });
                }
                let (chunk, c) = (slot / CHUNK_COLS, slot % CHUNK_COLS);
                for r in 0..GROUP_ROWS {
                    let row = g * GROUP_ROWS + r;
                    let v = self.values[chunk * TILE_BYTES + r * CHUNK_COLS + c];
                    if row < self.logical_rows && v != 0 {
                        out[row * self.cols + k] = v;
                    }
                }
            }
        }
        Ok(Tensor::from_s8([self.logical_rows, self.cols], out)?)
    }

    /// `1 - nnz_blocks / total_blocks`, padding excluded.
    pub fn sparsity_ratio(&self) -> f64 {
        let total = self.groups() * self.cols;
        1.0 - self.nnz_blocks() as f64 / total as f64
    }

    /// Row sums of the dense weight, used for activation zero-point
    /// compensation.
    pub fn row_sums(&self) -> Vec<i32> {
        let mut sums = vec![0i32; self.logical_rows];
        for g in 0..self.groups() {
            for (r, chunk_row) in self.group_tiles(g).flat_map(|t| t.chunks_exact(CHUNK_COLS).enumerate()) {
                let row = g * GROUP_ROWS + r;
                if row < self.logical_rows {
                    let s: i32 = chunk_row.iter().map(|&v| v as i32).sum();
                    sums[row] = sums[row].wrapping_add(s);
                }
            }
        }
        sums
    }

    pub fn rows(&self) -> usize {
        self.logical_rows
    }

    pub fn padded_rows(&self) -> usize {
        self.groups() * GROUP_ROWS
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn groups(&self) -> usize {
        self.nnz.len()
    }

    pub fn nnz_blocks(&self) -> usize {
        self.nnz.iter().map(|&n| n as usize).sum()
    }

    /// Real block counts per group.
    pub fn group_nnz(&self) -> &[u32] {
        &self.nnz
    }

    /// Padded column indices of group `g` (multiple of four).
    pub fn group_indices(&self, g: usize) -> &[u32] {
        &self.indices[self.offsets[g]..self.offsets[g + 1]]
    }

    /// Raw micro-tile bytes of group `g`.
    pub fn group_values(&self, g: usize) -> &[i8] {
        let (s, e) = (self.offsets[g] / CHUNK_COLS, self.offsets[g + 1] / CHUNK_COLS);
        &self.values[s * TILE_BYTES..e * TILE_BYTES]
    }

    pub fn group_tiles(&self, g: usize) -> std::slice::ChunksExact<'_, i8> {
        self.group_values(g).chunks_exact(TILE_BYTES)
    }

    /// Number of four-column chunks in group `g`.
    pub fn group_chunks(&self, g: usize) -> usize {
        (self.offsets[g + 1] - self.offsets[g]) / CHUNK_COLS
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    /// Mutable micro-tile storage. The sparsity pattern is fixed; only the
    /// stored values may change.
    pub fn values_mut(&mut self) -> &mut [i8] {
        &mut self.values
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Bytes held by indices and values.
    pub fn storage_bytes(&self) -> usize {
        self.indices.len() * 4 + self.values.len() + self.nnz.len() * 4 + self.scales.len() * 4
    }
}

pub fn encode_sparse(w: &Tensor) -> Result<Sparse4x1Weight, FormatError> {
    Sparse4x1Weight::encode(w)
}

pub fn decode_sparse(s: &Sparse4x1Weight) -> Result<Tensor, FormatError> {
    s.decode()
}

pub fn sparsity_ratio(s: &Sparse4x1Weight) -> f64 {
    s.sparsity_ratio()
}

/// Synthetic `S8 [M x K]` weight following the 4x1 pattern.
///
/// Exactly `round((1 - target_ratio) * ceil(M/4) * K)` blocks are chosen
/// uniformly at random and filled with nonzero values; everything else is
/// zero. Deterministic for a given seed.
pub fn generate_pattern_weight(rows: usize, cols: usize, target_ratio: f64, seed: u64) -> Tensor {
    assert!((0.0..=1.0).contains(&target_ratio), "sparsity ratio {target_ratio} outside [0, 1]");
    let groups = rows.div_ceil(GROUP_ROWS);
    let total = groups * cols;
    let keep = ((1.0 - target_ratio) * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0i8; rows * cols];
    let mut chosen: Vec<usize> = sample(&mut rng, total, keep.min(total)).into_vec();
    chosen.sort_unstable();
    for block in chosen {
        let (g, k) = (block / cols, block % cols);
        for r in g * GROUP_ROWS..((g + 1) * GROUP_ROWS).min(rows) {
            let mag: i8 = rng.random_range(1..=127);
            data[r * cols + k] = if rng.random::<bool>() { mag } else { -mag };
        }
    }
    Tensor::from_s8([rows, cols], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use proptest::prelude::*;

    fn dense(rows: usize, cols: usize, v: Vec<i8>) -> Tensor {
        Tensor::from_s8([rows, cols], v).unwrap()
    }

    #[test]
    fn zero_matrix_has_no_blocks() {
        let s = encode_sparse(&Tensor::zeros([4, 8], DType::S8)).unwrap();
        assert_eq!(s.nnz_blocks(), 0);
        assert_eq!(s.group_chunks(0), 0);
        assert_eq!(s.sparsity_ratio(), 1.0);
        assert_eq!(decode_sparse(&s).unwrap(), Tensor::zeros([4, 8], DType::S8));
    }

    #[test]
    fn fully_dense_4x4_is_one_tile() {
        let w = dense(4, 4, (1..=16).collect());
        let s = encode_sparse(&w).unwrap();
        assert_eq!(s.group_indices(0), &[0, 1, 2, 3]);
        assert_eq!(s.group_chunks(0), 1);
        assert_eq!(s.sparsity_ratio(), 0.0);
        // Row-major [row][chunk column] micro-tile.
        assert_eq!(s.group_values(0), (1..=16).collect::<Vec<i8>>().as_slice());
    }

    #[test]
    fn single_block_decodes_to_column() {
        let mut v = vec![0i8; 4 * 8];
        for r in 0..4 {
            v[r * 8 + 3] = r as i8 + 1;
        }
        let s = encode_sparse(&dense(4, 8, v.clone())).unwrap();
        assert_eq!(s.group_nnz(), &[1]);
        assert_eq!(s.group_indices(0), &[3, 0, 0, 0]);
        let d = decode_sparse(&s).unwrap();
        let col: Vec<i8> = (0..4).map(|r| d.as_s8().unwrap()[r * 8 + 3]).collect();
        assert_eq!(col, vec![1, 2, 3, 4]);
        assert_eq!(d.as_s8().unwrap(), v.as_slice());
    }

    #[test]
    fn padding_slot_with_index_zero_does_not_clobber_column_zero() {
        // Column 0 and 5 stored: the two padding slots also point at column 0.
        let mut v = vec![0i8; 4 * 8];
        v[0] = 9;
        v[8 + 5] = -3;
        let s = encode_sparse(&dense(4, 8, v.clone())).unwrap();
        assert_eq!(s.group_indices(0), &[0, 5, 0, 0]);
        assert_eq!(decode_sparse(&s).unwrap().as_s8().unwrap(), v.as_slice());
        s.validate().unwrap();
    }

    #[test]
    fn pattern_matrix_round_trip_and_ratio() {
        // 8x16 has 2*16 = 32 blocks; keep 8 of them.
        let w = generate_pattern_weight(8, 16, 0.75, 7);
        let s = encode_sparse(&w).unwrap();
        assert_eq!(s.nnz_blocks(), 8);
        assert_eq!(s.sparsity_ratio(), 0.75);
        assert_eq!(decode_sparse(&s).unwrap(), w);
    }

    #[test]
    fn non_multiple_of_four_rows() {
        let w = dense(5, 3, vec![1, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 3]);
        let s = encode_sparse(&w).unwrap();
        assert_eq!(s.groups(), 2);
        assert_eq!(s.padded_rows(), 8);
        assert_eq!(s.group_indices(1), &[2, 0, 0, 0]);
        assert_eq!(decode_sparse(&s).unwrap(), w);
        assert_eq!(s.row_sums(), vec![1, 0, 2, 0, 3]);
    }

    #[test]
    fn corrupted_index_is_a_format_error() {
        let mut s = encode_sparse(&generate_pattern_weight(4, 8, 0.5, 1)).unwrap();
        s.indices[0] = 99;
        assert!(matches!(decode_sparse(&s), Err(FormatError::IndexOutOfRange { index: 99, .. })));
        assert!(s.validate().is_err());
    }

    #[test]
    fn from_parts_checks_invariants() {
        let s = encode_sparse(&generate_pattern_weight(8, 32, 0.6, 3)).unwrap();
        let ok =
            Sparse4x1Weight::from_parts(8, 32, s.nnz.clone(), s.indices.clone(), s.values.clone(), s.scales.clone())
                .unwrap();
        assert_eq!(ok, s);

        let mut idx = s.indices.clone();
        idx.swap(0, 1);
        let bad = Sparse4x1Weight::from_parts(8, 32, s.nnz.clone(), idx, s.values.clone(), s.scales.clone());
        assert!(matches!(bad, Err(FormatError::Unsorted { group: 0 })));

        let bad = Sparse4x1Weight::from_parts(8, 32, s.nnz.clone(), s.indices.clone(), vec![0; 3], s.scales.clone());
        assert!(matches!(bad, Err(FormatError::Inconsistent(_))));
    }

    #[test]
    fn generator_extremes() {
        assert_eq!(generate_pattern_weight(8, 8, 1.0, 0), Tensor::zeros([8, 8], DType::S8));
        let full = generate_pattern_weight(8, 8, 0.0, 0);
        assert!(full.as_s8().unwrap().iter().all(|&v| v != 0));
        assert_eq!(generate_pattern_weight(16, 32, 0.8, 42), generate_pattern_weight(16, 32, 0.8, 42));
        assert_ne!(generate_pattern_weight(16, 32, 0.8, 42), generate_pattern_weight(16, 32, 0.8, 43));
    }

    #[test]
    fn generator_hits_target_ratio() {
        let s = encode_sparse(&generate_pattern_weight(256, 256, 0.9, 11)).unwrap();
        let one_block = 1.0 / (64.0 * 256.0);
        assert!((s.sparsity_ratio() - 0.9).abs() <= one_block + 1e-12);
    }

    fn arb_matrix() -> impl Strategy<Value = Tensor> {
        (1usize..=64, 1usize..=128, 0.0f64..=1.0, any::<u64>()).prop_map(|(m, k, density, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = (0..m * k).map(|_| if rng.random_bool(density) { rng.random::<i8>() } else { 0 }).collect();
            dense(m, k, v)
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(w in arb_matrix()) {
            let s = encode_sparse(&w).unwrap();
            s.validate().unwrap();
            prop_assert_eq!(decode_sparse(&s).unwrap(), w);
        }

        #[test]
        fn block_count_bounded(w in arb_matrix()) {
            let s = encode_sparse(&w).unwrap();
            let (m, k) = w.dims2().unwrap();
            let data = w.as_s8().unwrap();
            let full = (0..m.div_ceil(4)).all(|g| (0..k).all(|c| {
                (g * 4..(g * 4 + 4).min(m)).any(|r| data[r * k + c] != 0)
            }));
            prop_assert!(s.nnz_blocks() <= m.div_ceil(4) * k);
            prop_assert_eq!(s.nnz_blocks() == m.div_ceil(4) * k, full);
        }

        #[test]
        fn row_sums_match_dense(w in arb_matrix()) {
            let s = encode_sparse(&w).unwrap();
            let (_, k) = w.dims2().unwrap();
            let expect: Vec<i32> = w.as_s8().unwrap().chunks_exact(k)
                .map(|r| r.iter().map(|&v| v as i32).sum()).collect();
            prop_assert_eq!(s.row_sums(), expect);
        }
    }
}
