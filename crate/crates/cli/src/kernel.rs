//! Sparse-vs-dense kernel grid: oracle check and timing per cell.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::Serialize;

use spinfer_core::kernels::{
    dense_exec, spmm_exec, spmm_ref, ActivationLayout, DenseActivationLayout, DensePlan, Epilogue, LinearParams,
    PackedDenseWeight, SpmmConfig, SpmmPlan,
};
use spinfer_core::sparse::{generate_pattern_weight, Sparse4x1Weight};
use spinfer_core::Tensor;

use crate::grid::Shape;
use crate::timing::{measure_interleaved, Timing, TimingConfig};

/// One benchmark cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub shape: Shape,
    pub ratio: f64,
    pub threads: usize,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Shape { m, k, n } = self.shape;
        write!(f, "m={m} k={k} n={n} ratio={:.2} threads={}", self.ratio, self.threads)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Cell {
    /// Data seed. Independent of the thread count, so every thread count
    /// of a shape and ratio sees the same operands.
    pub fn seed(&self, master: u64) -> u64 {
        let permille = (self.ratio * 1000.0).round() as u64;
        [self.shape.m as u64, self.shape.k as u64, self.shape.n as u64, permille]
            .into_iter()
            .fold(splitmix(master), |h, v| splitmix(h ^ v))
    }
}

/// Cells in report order: shape, then ratio, then threads.
pub fn cells(shapes: &[Shape], ratios: &[f64], threads: &[usize]) -> Vec<Cell> {
    let mut out = Vec::with_capacity(shapes.len() * ratios.len() * threads.len());
    for &shape in shapes {
        for &ratio in ratios {
            for &threads in threads {
                out.push(Cell { shape, ratio, threads });
            }
        }
    }
    out
}

/// Operands of one cell.
pub struct CellData {
    pub weight: Arc<Sparse4x1Weight>,
    pub dense: Arc<PackedDenseWeight>,
    /// `[K x N]` row-major.
    pub act: Vec<u8>,
    pub a_zp: i32,
    pub bias: Vec<i32>,
}

impl CellData {
    pub fn generate(shape: Shape, ratio: f64, seed: u64) -> Self {
        let Shape { m, k, n } = shape;
        let w = generate_pattern_weight(m, k, ratio, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
        let act = (0..k * n).map(|_| rng.random()).collect();
        let a_zp = rng.random_range(0..=255);
        let bias = (0..m).map(|_| rng.random_range(-(1 << 20)..(1 << 20))).collect();
        Self::from_parts(&w, act, a_zp, bias)
    }

    /// `w` is a dense S8 `[M x K]` matrix.
    pub fn from_parts(w: &Tensor, act: Vec<u8>, a_zp: i32, bias: Vec<i32>) -> Self {
        Self {
            weight: Arc::new(Sparse4x1Weight::encode(w).expect("any S8 matrix encodes")),
            dense: Arc::new(PackedDenseWeight::pack(w).expect("any S8 matrix packs")),
            act,
            a_zp,
            bias,
        }
    }

    fn params(&self, epilogue: &Epilogue) -> LinearParams {
        LinearParams { a_zp: self.a_zp, bias: self.bias.clone(), epilogue: epilogue.clone() }
    }

    pub fn oracle(&self, n: usize, epilogue: &Epilogue) -> Tensor {
        let k = self.weight.cols();
        let a = Tensor::from_u8([k, n], self.act.clone()).expect("activation shape");
        spmm_ref(&self.weight, &a, self.a_zp, &self.bias, epilogue, &[]).expect("oracle inputs are consistent")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Sparse,
    Dense,
}

/// Corrupts one stored weight byte of the sparse plan after planning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub cell: Cell,
}

/// The byte a fault flips and its values before and after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlippedByte {
    pub index: usize,
    pub before: i8,
    pub after: i8,
}

/// Flip every bit of one stored weight byte, preferring a nonzero value.
pub fn flip_weight_byte(plan: &mut SpmmPlan, seed: u64) -> FlippedByte {
    let values = plan.weight_values_mut();
    let nonzero: Vec<usize> = (0..values.len()).filter(|&i| values[i] != 0).collect();
    let pick = splitmix(seed ^ 0xFA17);
    let index = if nonzero.is_empty() { pick as usize % values.len() } else { nonzero[pick as usize % nonzero.len()] };
    let before = values[index];
    values[index] = !before;
    FlippedByte { index, before, after: !before }
}

/// First output element where an optimized path disagrees with the oracle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub cell: Cell,
    pub path: PathKind,
    pub master_seed: u64,
    pub cell_seed: u64,
    pub row: usize,
    pub col: usize,
    pub expected: i64,
    pub actual: i64,
    pub fault: Option<FlippedByte>,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} kernel disagrees with oracle at cell [{}], output [row {}, col {}]: expected {}, got {} (seed {}, cell seed {:#018x})",
            self.path, self.cell, self.row, self.col, self.expected, self.actual, self.master_seed, self.cell_seed
        )?;
        if let Some(b) = self.fault {
            write!(f, "; injected fault flipped stored weight byte {} ({} -> {})", b.index, b.before, b.after)?;
        }
        Ok(())
    }
}

pub type Difference = (usize, usize, i64, i64);

/// First differing element of two row-major `[rows x cols]` integer outputs.
pub fn first_difference(expected: &Tensor, actual: &Tensor) -> Option<Difference> {
    let cols = *expected.shape().last()?;
    let (e, a) = (integers(expected), integers(actual));
    if e.len() != a.len() {
        return Some((0, 0, e.len() as i64, a.len() as i64));
    }
    e.iter().zip(&a).position(|(x, y)| x != y).map(|i| (i / cols, i % cols, e[i], a[i]))
}

fn integers(t: &Tensor) -> Vec<i64> {
    if let Ok(v) = t.as_s32() {
        v.iter().map(|&x| x as i64).collect()
    } else if let Ok(v) = t.as_u8() {
        v.iter().map(|&x| x as i64).collect()
    } else if let Ok(v) = t.as_s8() {
        v.iter().map(|&x| x as i64).collect()
    } else {
        t.as_f32().expect("f32").iter().map(|&x| x.to_bits() as i64).collect()
    }
}

/// Thread pools per thread count, built once per harness run.
#[derive(Default)]
pub struct Pools {
    pools: BTreeMap<usize, ThreadPool>,
}

impl Pools {
    /// Pool for `threads`, if [`Pools::get`] already built it.
    pub fn ready(&self, threads: usize) -> Option<&ThreadPool> {
        self.pools.get(&threads)
    }

    pub fn get(&mut self, threads: usize) -> Option<&ThreadPool> {
        if threads <= 1 {
            return None;
        }
        Some(
            self.pools
                .entry(threads)
                .or_insert_with(|| ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")),
        )
    }
}

/// Plans and packed activations for one cell, ready to execute.
pub struct Prepared {
    pub sparse: SpmmPlan,
    pub dense: DensePlan,
    sparse_act: ActivationLayout,
    dense_act: DenseActivationLayout,
}

impl Prepared {
    pub fn new(data: &CellData, n: usize, threads: usize, epilogue: &Epilogue) -> Self {
        let cfg = SpmmConfig::with_threads(threads);
        let sparse = SpmmPlan::new(data.weight.clone(), n, cfg, data.params(epilogue)).expect("valid sparse plan");
        let dense = DensePlan::new(data.dense.clone(), n, cfg, data.params(epilogue)).expect("valid dense plan");
        let (k, bn) = (data.weight.cols(), cfg.tiling.bn);
        Self {
            sparse,
            dense,
            sparse_act: ActivationLayout::from_kn(&data.act, k, n, bn).expect("activation layout"),
            dense_act: DenseActivationLayout::from_kn(&data.act, k, n, bn).expect("activation layout"),
        }
    }

    pub fn run_sparse(&self, pool: Option<&ThreadPool>) -> Tensor {
        spmm_exec(&self.sparse, &self.sparse_act, pool).expect("plan matches layout")
    }

    pub fn run_dense(&self, pool: Option<&ThreadPool>) -> Tensor {
        dense_exec(&self.dense, &self.dense_act, pool).expect("plan matches layout")
    }
}

/// Check both paths of one cell against `expected`.
pub fn check_prepared(prep: &Prepared, expected: &Tensor, pool: Option<&ThreadPool>) -> [Option<Difference>; 2] {
    [first_difference(expected, &prep.run_sparse(pool)), first_difference(expected, &prep.run_dense(pool))]
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub shapes: Vec<Shape>,
    pub ratios: Vec<f64>,
    pub threads: Vec<usize>,
    pub timing: TimingConfig,
    pub seed: u64,
    /// Time cells after checking them. Off for pure equivalence sweeps.
    pub timed: bool,
}

/// One CSV/JSON row. Timing fields are empty when the output of the cell
/// failed its oracle check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelRow {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub ratio: f64,
    pub threads: usize,
    pub path: PathKind,
    pub median_ns: Option<u64>,
    pub min_ns: Option<u64>,
    pub speedup_vs_dense: Option<f64>,
    pub equiv: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KernelReport {
    pub rows: Vec<KernelRow>,
    pub failures: Vec<Mismatch>,
    /// Checked cells (rows come in sparse/dense pairs).
    pub cells: usize,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn sparse_rows(&self) -> impl Iterator<Item = &KernelRow> {
        self.rows.iter().filter(|r| r.path == PathKind::Sparse)
    }
}

/// One checked cell, waiting for its timing.
struct Checked {
    cell: Cell,
    prep: Prepared,
    ok: [bool; 2],
}

/// Run the grid. Each `(shape, ratio)` generates its operands and oracle
/// output once and every thread count is checked against it. When timing
/// is on, the paths that passed are then timed together per shape, their
/// samples interleaved so machine noise cannot favour one ratio or thread
/// count. Nothing runs concurrently with a timed kernel.
pub fn bench_kernel(cfg: &KernelConfig, fault: Option<Fault>, mut progress: impl FnMut(&Cell)) -> KernelReport {
    let epilogue = Epilogue::accumulator();
    let mut pools = Pools::default();
    for &t in &cfg.threads {
        pools.get(t);
    }
    let mut report = KernelReport::default();
    for &shape in &cfg.shapes {
        let mut checked = Vec::with_capacity(cfg.ratios.len() * cfg.threads.len());
        for &ratio in &cfg.ratios {
            let cell_seed = Cell { shape, ratio, threads: 1 }.seed(cfg.seed);
            let data = CellData::generate(shape, ratio, cell_seed);
            let expected = data.oracle(shape.n, &epilogue);
            for &threads in &cfg.threads {
                let cell = Cell { shape, ratio, threads };
                progress(&cell);
                report.cells += 1;
                let mut prep = Prepared::new(&data, shape.n, threads, &epilogue);
                let flipped = match fault {
                    Some(f) if f.cell == cell => Some(flip_weight_byte(&mut prep.sparse, cell_seed)),
                    _ => None,
                };
                let diffs = check_prepared(&prep, &expected, pools.ready(threads));
                for (path, d) in [PathKind::Sparse, PathKind::Dense].into_iter().zip(diffs) {
                    if let Some((row, col, expected, actual)) = d {
                        report.failures.push(Mismatch {
                            cell,
                            path,
                            master_seed: cfg.seed,
                            cell_seed,
                            row,
                            col,
                            expected,
                            actual,
                            fault: flipped,
                        });
                    }
                }
                checked.push(Checked { cell, prep, ok: diffs.map(|d| d.is_none()) });
            }
        }
        let mut timings = vec![[None::<Timing>; 2]; checked.len()];
        if cfg.timed {
            let mut slots = Vec::new();
            let mut fs: Vec<Box<dyn FnMut() + '_>> = Vec::new();
            for (i, c) in checked.iter().enumerate() {
                let pool = pools.ready(c.cell.threads);
                let prep = &c.prep;
                if c.ok[0] {
                    slots.push((i, 0));
                    fs.push(Box::new(move || drop(std::hint::black_box(prep.run_sparse(pool)))));
                }
                if c.ok[1] {
                    slots.push((i, 1));
                    fs.push(Box::new(move || drop(std::hint::black_box(prep.run_dense(pool)))));
                }
            }
            let mut refs: Vec<&mut dyn FnMut()> = fs.iter_mut().map(|f| &mut **f as &mut dyn FnMut()).collect();
            for ((i, p), t) in slots.into_iter().zip(measure_interleaved(cfg.timing, &mut refs)) {
                timings[i][p] = Some(t);
            }
        }
        for (c, [s, d]) in checked.iter().zip(timings) {
            let row = |path, t: Option<Timing>, speedup, equiv| KernelRow {
                m: shape.m,
                k: shape.k,
                n: shape.n,
                ratio: c.cell.ratio,
                threads: c.cell.threads,
                path,
                median_ns: t.map(|t| t.median_ns),
                min_ns: t.map(|t| t.min_ns),
                speedup_vs_dense: speedup,
                equiv,
            };
            let speedup = s.zip(d).map(|(s, d)| d.median_ns as f64 / s.median_ns.max(1) as f64);
            report.rows.push(row(PathKind::Sparse, s, speedup, c.ok[0]));
            report.rows.push(row(PathKind::Dense, d, d.map(|_| 1.0), c.ok[1]));
        }
    }
    report
}
