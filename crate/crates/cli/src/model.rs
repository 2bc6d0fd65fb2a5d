//! End-to-end encoder throughput and latency.

use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Context;
use serde::Serialize;

use spinfer_core::graph::{build_encoder, execute, optimize, EncoderModel, Executor};
use spinfer_core::model_io::{generate_synthetic_model, random_input};
use spinfer_core::runtime::ThreadTopology;
use spinfer_core::{Backend, Tensor};

use crate::grid::ModelPreset;
use crate::timing::{summarize, TimingConfig};

/// Batch sizes searched for throughput.
pub const DEFAULT_BATCHES: [usize; 5] = [1, 2, 4, 8, 16];

/// Output agreement of the fused graph with the unfused one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FusionDiff {
    pub elements: usize,
    pub differing: usize,
    /// Largest difference in quantization steps.
    pub max_steps: i32,
}

impl FusionDiff {
    /// At most one step apart, on at most 0.1% of elements.
    pub fn within_tolerance(&self) -> bool {
        self.max_steps <= 1 && self.differing * 1000 <= self.elements
    }
}

/// Run the unfused and the optimized encoder on the same random input.
pub fn fused_vs_unfused(
    model: &EncoderModel,
    batch: usize,
    seq: usize,
    threads: usize,
    seed: u64,
) -> anyhow::Result<FusionDiff> {
    let g = build_encoder(model, batch, seq)?;
    let fused = Arc::new(optimize(&g)?);
    let x = random_input(batch, seq, model.config.hidden, seed);
    let want = execute(&g, &[&x])?;
    let got = Executor::new(fused, threads, Backend::detect())?.run(&[&x])?;
    let (a, b) = (want[0].as_u8()?, got[0].as_u8()?);
    anyhow::ensure!(a.len() == b.len(), "output sizes differ: {} vs {}", a.len(), b.len());
    let steps = a.iter().zip(b).map(|(&x, &y)| (x as i32 - y as i32).abs());
    let (differing, max_steps) = steps.fold((0, 0), |(n, m), d| (n + usize::from(d != 0), m.max(d)));
    Ok(FusionDiff { elements: a.len(), differing, max_steps })
}

/// One (topology, batch) measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Measurement {
    pub instances: usize,
    pub threads: usize,
    pub batch: usize,
    /// Sequences per second across all instances.
    pub throughput: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

/// Topologies whose total thread count stays within `max(threads)`.
pub fn topologies(threads: &[usize]) -> Vec<ThreadTopology> {
    let cores = threads.iter().copied().max().unwrap_or(1);
    let mut out = Vec::new();
    for &t in threads {
        for i in 1..=cores / t.max(1) {
            if let Ok(topo) = ThreadTopology::new(i, t, cores) {
                if !out.contains(&topo) {
                    out.push(topo);
                }
            }
        }
    }
    out
}

/// Serve `timing.reps` requests per instance after `timing.warmup`
/// untimed ones, all instances concurrently.
pub fn measure_config(
    model: &EncoderModel,
    seq: usize,
    topo: ThreadTopology,
    batch: usize,
    timing: TimingConfig,
    seed: u64,
) -> anyhow::Result<Measurement> {
    let graph = Arc::new(optimize(&build_encoder(model, batch, seq)?)?);
    let mut execs = (0..topo.num_instances)
        .map(|_| Executor::new(graph.clone(), topo.threads_per_instance, Backend::detect()))
        .collect::<Result<Vec<_>, _>>()?;
    let x = random_input(batch, seq, model.config.hidden, seed);
    let reps = timing.reps.max(1);
    let per_instance = std::thread::scope(|s| {
        let handles: Vec<_> = execs
            .iter_mut()
            .map(|e| {
                let x = &x;
                s.spawn(move || -> anyhow::Result<(Instant, Instant, Vec<u64>)> {
                    let mut out: Vec<Tensor> = e.alloc_outputs();
                    for _ in 0..timing.warmup {
                        e.run_into(&[x], &mut out)?;
                    }
                    let start = Instant::now();
                    let mut lat = Vec::with_capacity(reps);
                    for _ in 0..reps {
                        let t = Instant::now();
                        e.run_into(&[x], &mut out)?;
                        lat.push(t.elapsed().as_nanos() as u64);
                    }
                    Ok((start, Instant::now(), lat))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("instance thread panicked")).collect::<Result<Vec<_>, _>>()
    })?;
    let start = per_instance.iter().map(|r| r.0).min().expect("at least one instance");
    let end = per_instance.iter().map(|r| r.1).max().expect("at least one instance");
    let mut lat: Vec<u64> = per_instance.into_iter().flat_map(|r| r.2).collect();
    let t = summarize(&mut lat);
    let wall = end.duration_since(start).max(Duration::from_nanos(1)).as_secs_f64();
    Ok(Measurement {
        instances: topo.num_instances,
        threads: topo.threads_per_instance,
        batch,
        throughput: (topo.num_instances * reps * batch) as f64 / wall,
        p50_ms: t.median_ns as f64 / 1e6,
        p99_ms: t.p99_ns as f64 / 1e6,
    })
}

/// Where the benchmarked models come from.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    /// One synthetic model per sparsity ratio.
    Synthetic {
        preset: ModelPreset,
        ratios: Vec<f64>,
    },
    Loaded {
        name: String,
        model: EncoderModel,
    },
}

#[derive(Debug, Clone)]
pub struct ModelBenchConfig {
    pub spec: ModelSpec,
    pub seq_lens: Vec<usize>,
    pub budget_ms: f64,
    pub threads: Vec<usize>,
    pub batches: Vec<usize>,
    pub timing: TimingConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Met,
    #[serde(rename = "constraint unmet")]
    ConstraintUnmet,
    #[serde(rename = "equivalence failed")]
    EquivalenceFailed,
}

/// Result per model and sequence length: throughput under the latency
/// budget, unconstrained throughput and minimal latency. When no
/// configuration meets the budget, the `constrained_*` fields describe
/// the configuration with the best p99 latency.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub model: String,
    pub ratio: f64,
    pub seq_len: usize,
    pub budget_ms: f64,
    pub status: Status,
    pub constrained_throughput: Option<f64>,
    pub constrained_instances: Option<usize>,
    pub constrained_threads: Option<usize>,
    pub constrained_batch: Option<usize>,
    pub constrained_p99_ms: Option<f64>,
    pub max_throughput: Option<f64>,
    pub max_throughput_instances: Option<usize>,
    pub max_throughput_threads: Option<usize>,
    pub max_throughput_batch: Option<usize>,
    pub min_latency_ms: Option<f64>,
    pub min_latency_threads: Option<usize>,
    pub equiv: bool,
}

/// Mean Linear sparsity of a model.
pub fn model_ratio(m: &EncoderModel) -> f64 {
    let ratios: Vec<f64> = m.layers.iter().flat_map(|l| l.linears()).map(|l| l.weight.sparsity_ratio()).collect();
    ratios.iter().sum::<f64>() / ratios.len().max(1) as f64
}

/// Reduce the measurements of one sequence length to a row.
pub fn summarize_row(model: &str, ratio: f64, seq_len: usize, budget_ms: f64, ms: &[Measurement]) -> ModelRow {
    let by = |f: fn(&Measurement) -> f64| move |a: &&Measurement, b: &&Measurement| f(a).total_cmp(&f(b));
    let fastest = ms.iter().max_by(by(|m| m.throughput));
    let within = ms.iter().filter(|m| m.p99_ms <= budget_ms).max_by(by(|m| m.throughput));
    let best_latency = ms.iter().min_by(by(|m| m.p99_ms));
    let min_latency = ms.iter().filter(|m| m.batch == 1 && m.instances == 1).min_by(by(|m| m.p50_ms));
    let (status, constrained) = match within {
        Some(m) => (Status::Met, Some(m)),
        None => (Status::ConstraintUnmet, best_latency),
    };
    ModelRow {
        model: model.to_string(),
        ratio,
        seq_len,
        budget_ms,
        status,
        constrained_throughput: constrained.map(|m| m.throughput),
        constrained_instances: constrained.map(|m| m.instances),
        constrained_threads: constrained.map(|m| m.threads),
        constrained_batch: constrained.map(|m| m.batch),
        constrained_p99_ms: constrained.map(|m| m.p99_ms),
        max_throughput: fastest.map(|m| m.throughput),
        max_throughput_instances: fastest.map(|m| m.instances),
        max_throughput_threads: fastest.map(|m| m.threads),
        max_throughput_batch: fastest.map(|m| m.batch),
        min_latency_ms: min_latency.map(|m| m.p50_ms),
        min_latency_threads: min_latency.map(|m| m.threads),
        equiv: true,
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModelReport {
    pub rows: Vec<ModelRow>,
    /// Fusion mismatches, one line each.
    pub failures: Vec<String>,
}

pub fn bench_model(cfg: &ModelBenchConfig, mut log: impl FnMut(&str)) -> anyhow::Result<ModelReport> {
    let models: Vec<(String, f64, EncoderModel)> = match &cfg.spec {
        ModelSpec::Synthetic { preset, ratios } => ratios
            .iter()
            .map(|&r| {
                log(&format!("generating {} at ratio {r:.2}", preset.name));
                let m = generate_synthetic_model(
                    preset.layers,
                    preset.hidden,
                    preset.heads,
                    preset.intermediate,
                    r,
                    cfg.seed,
                )
                .with_context(|| format!("generating {}", preset.name))?;
                Ok((preset.name.to_string(), r, m))
            })
            .collect::<anyhow::Result<_>>()?,
        ModelSpec::Loaded { name, model } => vec![(name.clone(), model_ratio(model), model.clone())],
    };
    let topos = topologies(&cfg.threads);
    let mut report = ModelReport::default();
    for (name, ratio, model) in &models {
        for &seq in &cfg.seq_lens {
            let diff = fused_vs_unfused(model, 1, seq, 1, cfg.seed)?;
            if !diff.within_tolerance() {
                report.failures.push(format!(
                    "{name} ratio {ratio:.2} seq {seq}: fused output differs on {}/{} elements (max {} steps, seed {})",
                    diff.differing, diff.elements, diff.max_steps, cfg.seed
                ));
                let mut row = summarize_row(name, *ratio, seq, cfg.budget_ms, &[]);
                row.status = Status::EquivalenceFailed;
                row.equiv = false;
                report.rows.push(row);
                continue;
            }
            let mut ms = Vec::new();
            for &topo in &topos {
                for &batch in &cfg.batches {
                    log(&format!(
                        "{name} ratio {ratio:.2} seq {seq}: {} x {} threads, batch {batch}",
                        topo.num_instances, topo.threads_per_instance
                    ));
                    ms.push(measure_config(model, seq, topo, batch, cfg.timing, cfg.seed)?);
                }
            }
            report.rows.push(summarize_row(name, *ratio, seq, cfg.budget_ms, &ms));
        }
    }
    Ok(report)
}
