//! Execution plans: tiling, thread partition and folded row offsets.

use std::ops::Range;
use std::sync::Arc;

use crate::sparse::{Sparse4x1Weight, GROUP_ROWS};

use super::epilogue::{Epilogue, OutputLayout};
use super::{Backend, KernelError};

/// Tile sizes. `m_block` and `k_block` are fixed by the 4x1 micro-tile and
/// the 4-deep dot product; `n_block` is the column extent of one register
/// tile and `bn` the activation panel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiling {
    pub m_block: usize,
    pub k_block: usize,
    pub n_block: usize,
    pub bn: usize,
}

impl Default for Tiling {
    fn default() -> Self {
        Self { m_block: 4, k_block: 4, n_block: 64, bn: 64 }
    }
}

impl Tiling {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.m_block != 4 || self.k_block != 4 {
            return Err(KernelError::Config("m_block and k_block are fixed at 4".into()));
        }
        if self.n_block != 64 {
            return Err(KernelError::Config("n_block must be 64 (four 16-lane sub-tiles)".into()));
        }
        if self.bn == 0 || !self.bn.is_multiple_of(16) {
            return Err(KernelError::Config(format!("bn {} must be a positive multiple of 16", self.bn)));
        }
        Ok(())
    }
}

/// Kernel configuration independent of the weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpmmConfig {
    pub tiling: Tiling,
    pub threads: usize,
    pub backend: Backend,
    pub layout: OutputLayout,
}

impl Default for SpmmConfig {
    fn default() -> Self {
        Self { tiling: Tiling::default(), threads: 1, backend: Backend::detect(), layout: OutputLayout::RowMajor }
    }
}

impl SpmmConfig {
    pub fn with_threads(threads: usize) -> Self {
        Self { threads, ..Self::default() }
    }
}

/// Per-Linear quantization parameters folded into the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub a_zp: i32,
    /// S32 bias per output row (empty means zero).
    pub bias: Vec<i32>,
    pub epilogue: Epilogue,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self { a_zp: 0, bias: Vec::new(), epilogue: Epilogue::accumulator() }
    }
}

/// One unit of parallel work: a rectangle of row groups x activation panels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub groups: Range<usize>,
    pub panels: Range<usize>,
}

/// Immutable execution plan for one sparse Linear at a fixed `N`.
#[derive(Debug, Clone)]
pub struct SpmmPlan {
    pub(crate) weight: Arc<Sparse4x1Weight>,
    pub(crate) n: usize,
    pub(crate) config: SpmmConfig,
    pub(crate) params: LinearParams,
    pub(crate) comp: Vec<i32>,
    /// `bias[m] - a_zp * comp[m]` over padded rows; accumulators start here.
    pub(crate) row_offsets: Vec<i32>,
    pub(crate) tasks: Vec<Task>,
}

/// Plan with default tiling, auto-detected backend and a raw accumulator
/// epilogue.
pub fn plan_spmm(weight: &Arc<Sparse4x1Weight>, n: usize, threads: usize) -> Result<SpmmPlan, KernelError> {
    SpmmPlan::new(weight.clone(), n, SpmmConfig::with_threads(threads), LinearParams::default())
}

impl SpmmPlan {
    pub fn new(
        weight: Arc<Sparse4x1Weight>,
        n: usize,
        config: SpmmConfig,
        params: LinearParams,
    ) -> Result<Self, KernelError> {
        if n == 0 {
            return Err(KernelError::Shape("N must be positive".into()));
        }
        if config.threads == 0 {
            return Err(KernelError::Config("threads must be at least 1".into()));
        }
        config.tiling.validate()?;
        if !config.backend.is_supported() {
            return Err(KernelError::Unsupported(config.backend));
        }
        let m = weight.rows();
        if !params.bias.is_empty() && params.bias.len() != m {
            return Err(KernelError::Shape(format!("bias has {} entries for {m} rows", params.bias.len())));
        }
        params.epilogue.check_rows(m)?;
        let comp = weight.row_sums();
        let row_offsets = row_offsets(&comp, &params.bias, params.a_zp, weight.padded_rows());
        let chunks: Vec<usize> = (0..weight.groups()).map(|g| weight.group_chunks(g)).collect();
        let tasks = partition(&chunks, n.div_ceil(config.tiling.bn), config.threads);
        Ok(Self { weight, n, config, params, comp, row_offsets, tasks })
    }

    pub fn weight(&self) -> &Arc<Sparse4x1Weight> {
        &self.weight
    }

    pub fn m(&self) -> usize {
        self.weight.rows()
    }

    pub fn k(&self) -> usize {
        self.weight.cols()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> &SpmmConfig {
        &self.config
    }

    pub fn params(&self) -> &LinearParams {
        &self.params
    }

    pub fn epilogue(&self) -> &Epilogue {
        &self.params.epilogue
    }

    /// `comp[m] = sum_k W[m, k]` per logical row.
    pub fn comp(&self) -> &[i32] {
        &self.comp
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn num_bn(&self) -> usize {
        self.n.div_ceil(self.config.tiling.bn)
    }

    /// Mutable access to the weight values, for fault-injection tests that
    /// corrupt a stored byte after planning. Clones the weight if shared.
    pub fn weight_values_mut(&mut self) -> &mut [i8] {
        Arc::make_mut(&mut self.weight).values_mut()
    }
}

pub(crate) fn row_offsets(comp: &[i32], bias: &[i32], a_zp: i32, padded_rows: usize) -> Vec<i32> {
    let mut off = vec![0i32; padded_rows];
    for (m, o) in off.iter_mut().enumerate().take(comp.len()) {
        let b = bias.get(m).copied().unwrap_or(0);
        *o = b.wrapping_sub(a_zp.wrapping_mul(comp[m]));
    }
    off
}

/// Split `0..n` into `parts` contiguous ranges whose sizes differ by at most
/// one, larger ranges first.
fn split_even(n: usize, parts: usize) -> Vec<Range<usize>> {
    let (q, r) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = q + usize::from(i < r);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

/// Split groups into `parts` non-empty contiguous ranges with roughly equal
/// micro-tile counts.
fn split_weighted(weights: &[usize], parts: usize) -> Vec<Range<usize>> {
    let n = weights.len();
    let parts = parts.min(n).max(1);
    // Every group costs at least one unit (epilogue and store).
    let cost: Vec<usize> = weights.iter().map(|&w| w + 1).collect();
    let total: usize = cost.iter().sum();
    let mut bounds = vec![0];
    let mut acc = 0;
    let mut g = 0;
    for i in 1..parts {
        let target = total * i / parts;
        while g < n && acc + cost[g] <= target {
            acc += cost[g];
            g += 1;
        }
        let lo = bounds[i - 1] + 1;
        let hi = n - (parts - i);
        let b = g.clamp(lo, hi);
        while g < b {
            acc += cost[g];
            g += 1;
        }
        while g > b {
            g -= 1;
            acc -= cost[g];
        }
        bounds.push(b);
    }
    bounds.push(n);
    bounds.windows(2).map(|w| w[0]..w[1]).collect()
}

/// Thread partition: whole panels when there are enough of them, otherwise
/// each panel's row groups are split as well.
pub(crate) fn partition(group_chunks: &[usize], num_bn: usize, threads: usize) -> Vec<Task> {
    let groups = group_chunks.len();
    if threads <= 1 {
        return vec![Task { groups: 0..groups, panels: 0..num_bn }];
    }
    if num_bn >= threads {
        return split_even(num_bn, threads).into_iter().map(|panels| Task { groups: 0..groups, panels }).collect();
    }
    let per_panel = threads.div_ceil(num_bn);
    let ranges = split_weighted(group_chunks, per_panel);
    (0..num_bn).flat_map(|p| ranges.iter().map(move |g| Task { groups: g.clone(), panels: p..p + 1 })).collect()
}

/// Rows covered by row group `g` of an `m`-row weight.
#[inline]
pub(crate) fn group_rows(g: usize, m: usize) -> usize {
    GROUP_ROWS.min(m - g * GROUP_ROWS)
}
