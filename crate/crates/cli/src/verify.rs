//! Correctness gate: kernel oracle, edge cases, exhaustive LUTs, fusion
//! equivalence and runtime reuse.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use spinfer_core::graph::{build_encoder, optimize, Executor};
use spinfer_core::kernels::{Epilogue, PostOp};
use spinfer_core::model_io::{from_bytes, generate_synthetic_model, random_input, to_bytes};
use spinfer_core::runtime::{run_parallel_instances, WeightRegistry};
use spinfer_core::sparse::generate_pattern_weight;
use spinfer_core::tensor::{QuantDType, QuantParams};
use spinfer_core::{apply_lut, build_lut, Backend, Tensor};

use crate::alloc::count_allocations;
use crate::grid::Shape;
use crate::kernel::{bench_kernel, check_prepared, Cell, CellData, Fault, KernelConfig, Pools, Prepared};
use crate::model::fused_vs_unfused;
use crate::timing::TimingConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub shapes: Vec<Shape>,
    pub ratios: Vec<f64>,
    pub threads: Vec<usize>,
    pub seed: u64,
    /// Flip one stored weight byte of the first grid cell after planning.
    pub inject_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    /// First failure, with what is needed to reproduce it.
    pub counterexample: Option<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &'static str, r: Result<String, String>) {
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(e) => {
                self.counterexample.get_or_insert_with(|| format!("{name}: {e}"));
                (false, e)
            }
        };
        self.checks.push(CheckResult { name, passed, detail });
    }
}

pub fn verify(cfg: &VerifyConfig, mut log: impl FnMut(&str)) -> VerifyReport {
    let mut report = VerifyReport::default();
    log("kernel oracle grid");
    report.push("kernel-oracle", kernel_grid(cfg));
    log("kernel edge cases");
    report.push("kernel-edge-cases", edge_cases(cfg.seed));
    log("exhaustive lookup tables");
    report.push("lut-exhaustive", lut_exhaustive(cfg.seed, 20));
    log("fused vs unfused encoder");
    report.push("fusion", fusion(cfg.seed));
    log("runtime reuse");
    report.push("runtime-reuse", runtime_reuse(cfg.seed));
    report
}

pub fn kernel_grid(cfg: &VerifyConfig) -> Result<String, String> {
    let kc = KernelConfig {
        shapes: cfg.shapes.clone(),
        ratios: cfg.ratios.clone(),
        threads: cfg.threads.clone(),
        timing: TimingConfig::default(),
        seed: cfg.seed,
        timed: false,
    };
    let fault = match (cfg.inject_fault, cfg.shapes.first(), cfg.ratios.first(), cfg.threads.first()) {
        (true, Some(&shape), Some(&ratio), Some(&threads)) => Some(Fault { cell: Cell { shape, ratio, threads } }),
        _ => None,
    };
    let r = bench_kernel(&kc, fault, |_| {});
    match r.failures.first() {
        None => Ok(format!("{} cells bit-exact", r.cells)),
        Some(f) => {
            let c = f.cell;
            Err(format!(
                "{f}\nreproduce: spinfer verify --seed {} --shapes {} --ratios {} --threads {}{}",
                f.master_seed,
                c.shape,
                c.ratio,
                c.threads,
                if f.fault.is_some() { " --inject-fault" } else { "" }
            ))
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum WeightKind {
    Pattern,
    Zero,
    Dense,
}

/// Tiny and odd shapes, with all-zero and fully dense weights, under a raw
/// and a requantizing epilogue.
pub fn edge_cases(seed: u64) -> Result<String, String> {
    let mut pools = Pools::default();
    let mut checked = 0;
    for m in [1, 3, 5, 7] {
        for k in [1, 4, 5, 63] {
            for n in [1, 15, 50] {
                for kind in [WeightKind::Pattern, WeightKind::Zero, WeightKind::Dense] {
                    let cell_seed =
                        Cell { shape: Shape::new(m, k, n), ratio: 0.0, threads: 1 }.seed(seed) ^ kind as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
                    let w: Vec<i8> = match kind {
                        WeightKind::Pattern => {
                            generate_pattern_weight(m, k, 0.5, cell_seed).as_s8().expect("s8").to_vec()
                        }
                        WeightKind::Zero => vec![0; m * k],
                        WeightKind::Dense => {
                            (0..m * k).map(|_| rng.random_range(1..=127) * if rng.random() { 1 } else { -1 }).collect()
                        }
                    };
                    let w = Tensor::from_s8([m, k], w).expect("shape");
                    let act = (0..k * n).map(|_| rng.random()).collect();
                    let bias = (0..m).map(|_| rng.random_range(-5000..5000)).collect();
                    let data = CellData::from_parts(&w, act, rng.random_range(0..=255), bias);
                    let scales: Vec<f32> = (0..m).map(|_| rng.random_range(1e-3..1e-2)).collect();
                    let out = QuantParams::per_tensor(QuantDType::U8, 0.05, 128).expect("valid");
                    let epis = [Epilogue::accumulator(), Epilogue::requantize(0.02, &scales, out).expect("valid")];
                    for epi in &epis {
                        let expected = data.oracle(n, epi);
                        for threads in [1, 4] {
                            let prep = Prepared::new(&data, n, threads, epi);
                            let diffs = check_prepared(&prep, &expected, pools.get(threads));
                            for (path, d) in ["sparse", "dense"].into_iter().zip(diffs) {
                                if let Some((r, c, e, a)) = d {
                                    return Err(format!(
                                        "{path} kernel at m={m} k={k} n={n} {kind:?} weight, threads {threads}, epilogue {:?}: [row {r}, col {c}] expected {e}, got {a} (seed {seed})",
                                        epi.out_dtype()
                                    ));
                                }
                            }
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{checked} edge cases bit-exact"))
}

fn random_params(rng: &mut ChaCha8Rng) -> QuantParams {
    let dtype = if rng.random() { QuantDType::U8 } else { QuantDType::S8 };
    let scale = 10f32.powf(rng.random_range(-3.0..-0.3));
    let zp = rng.random_range(dtype.min()..=dtype.max());
    QuantParams::per_tensor(dtype, scale, zp).expect("valid params")
}

// Independent scalar evaluation of each chain.
fn q(x: f32, p: &QuantParams) -> i32 {
    ((x / p.scale()).round_ties_even() + p.zero_point() as f32).clamp(p.dtype.min() as f32, p.dtype.max() as f32) as i32
}

fn dq(v: i32, p: &QuantParams) -> f32 {
    (v - p.zero_point()) as f32 * p.scale()
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6f32 * (x + 0.044_715 * x * x * x)).tanh())
}

/// Every key of every table for the identity, GELU and GELU-then-quantize
/// chains, under `sets` random parameter sets.
pub fn lut_exhaustive(seed: u64, sets: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1u64.rotate_left(40));
    let mut keys = 0;
    for set in 0..sets {
        let (pin, pout, pmid) = (random_params(&mut rng), random_params(&mut rng), random_params(&mut rng));
        type Oracle<'a> = Box<dyn Fn(i32) -> i32 + 'a>;
        let chains: [(&str, Vec<PostOp>, Oracle); 4] = [
            ("identity", vec![], Box::new(|k| q(dq(k, &pin), &pout))),
            ("gelu", vec![PostOp::Gelu], Box::new(|k| q(gelu(dq(k, &pin)), &pout))),
            (
                "gelu-quantize",
                vec![PostOp::Gelu, PostOp::Quantize(pout.clone())],
                Box::new(|k| q(gelu(dq(k, &pin)), &pout)),
            ),
            (
                "gelu-quantize-requantize",
                vec![PostOp::Gelu, PostOp::Quantize(pmid.clone()), PostOp::Dequantize(pmid.clone())],
                Box::new(|k| q(dq(q(gelu(dq(k, &pin)), &pmid), &pmid), &pout)),
            ),
        ];
        let all: Vec<i32> = (pin.dtype.min()..=pin.dtype.max()).collect();
        let input = match pin.dtype {
            QuantDType::U8 => Tensor::from_u8([256], all.iter().map(|&k| k as u8).collect()),
            QuantDType::S8 => Tensor::from_s8([256], all.iter().map(|&k| k as i8).collect()),
        }
        .expect("256 keys");
        for (name, chain, oracle) in &chains {
            let t = build_lut(8, chain, &pin, &pout).map_err(|e| format!("{name}: {e}"))?;
            let applied = apply_lut(&t, &input).map_err(|e| format!("{name}: {e}"))?;
            let applied: Vec<i32> = match pout.dtype {
                QuantDType::U8 => applied.as_u8().expect("u8").iter().map(|&v| v as i32).collect(),
                QuantDType::S8 => applied.as_s8().expect("s8").iter().map(|&v| v as i32).collect(),
            };
            for (&key, &got) in all.iter().zip(&applied) {
                let want = oracle(key);
                if t.lookup(key) != want || got != want {
                    return Err(format!(
                        "{name} table, param set {set}: key {key} maps to {} (applied {got}), expected {want}; in {pin:?}, out {pout:?} (seed {seed})",
                        t.lookup(key)
                    ));
                }
                keys += 1;
            }
        }
    }
    Ok(format!("{keys} keys exact"))
}

/// Toy encoder (2 layers, hidden 64, 4 heads) at 16 and 128 tokens.
pub fn fusion(seed: u64) -> Result<String, String> {
    let model = generate_synthetic_model(2, 64, 4, 256, 0.8, seed).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for seq in [16, 128] {
        for threads in [1, 4] {
            let d = fused_vs_unfused(&model, 1, seq, threads, seed).map_err(|e| e.to_string())?;
            if !d.within_tolerance() {
                return Err(format!(
                    "seq {seq}, threads {threads}: {} of {} elements differ, max {} steps (seed {seed})",
                    d.differing, d.elements, d.max_steps
                ));
            }
            detail.push(format!("seq {seq}/{threads}t: {} differing", d.differing));
        }
    }
    Ok(detail.join(", "))
}

/// Zero heap allocations on a repeated run, and one copy of the weights
/// across four instances loaded from the same bytes.
pub fn runtime_reuse(seed: u64) -> Result<String, String> {
    let e = |e: &dyn std::fmt::Display| e.to_string();
    let model = generate_synthetic_model(2, 64, 4, 256, 0.85, seed).map_err(|x| e(&x))?;
    let g = Arc::new(optimize(&build_encoder(&model, 1, 32).map_err(|x| e(&x))?).map_err(|x| e(&x))?);
    let mut exec = Executor::new(g, 1, Backend::detect()).map_err(|x| e(&x))?;
    let x = random_input(1, 32, 64, seed);
    let mut out = exec.alloc_outputs();
    exec.run_into(&[&x], &mut out).map_err(|x| e(&x))?;
    let (r, allocs) = count_allocations(|| exec.run_into(&[&x], &mut out));
    r.map_err(|x| e(&x))?;
    let allocs = allocs.ok_or("allocation counter is not installed in this process")?;
    if allocs != 0 {
        return Err(format!("second run made {allocs} heap allocations"));
    }

    let bytes = to_bytes(&model).map_err(|x| e(&x))?;
    let registry = WeightRegistry::new();
    let mut execs = Vec::new();
    for _ in 0..4 {
        let mut m = from_bytes(&bytes).map_err(|x| e(&x))?;
        m.share_weights(&registry);
        let g = Arc::new(optimize(&build_encoder(&m, 1, 16).map_err(|x| e(&x))?).map_err(|x| e(&x))?);
        execs.push(Executor::new(g, 1, Backend::detect()).map_err(|x| e(&x))?);
    }
    let reqs: Vec<Vec<Tensor>> = (0..8).map(|i| vec![random_input(1, 16, 64, seed ^ i)]).collect();
    let got = run_parallel_instances(&mut execs, &reqs).map_err(|x| e(&x))?;
    for (r, g) in reqs.iter().zip(&got) {
        if execs[0].run(&[&r[0]]).map_err(|x| e(&x))? != *g {
            return Err("parallel instances disagree with a sequential run".into());
        }
    }
    let mut seen = HashSet::new();
    let held: usize = execs
        .iter()
        .flat_map(|x| x.linear_plans())
        .filter(|p| seen.insert(Arc::as_ptr(p.weight())))
        .map(|p| p.weight().storage_bytes())
        .sum();
    let once = model.weight_bytes();
    if held != once || registry.stats().unique_bytes != once {
        return Err(format!(
            "4 instances hold {held} weight bytes, registry {}; one model has {once}",
            registry.stats().unique_bytes
        ));
    }
    Ok(format!("0 allocations on rerun; {once} weight bytes shared by 4 concurrent instances"))
}
