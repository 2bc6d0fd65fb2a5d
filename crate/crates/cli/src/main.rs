use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use spinfer_cli::alloc::CountingAlloc;
use spinfer_cli::grid::{self, benchmark_grid, oracle_grid, preset, Shape, DEFAULT_RATIOS, DEFAULT_THREADS};
use spinfer_cli::model::{bench_model, ModelBenchConfig, ModelSpec, DEFAULT_BATCHES};
use spinfer_cli::report::{emit, Format};
use spinfer_cli::{bench_kernel, verify, KernelConfig, TimingConfig, VerifyConfig};
use spinfer_core::model_io::{generate_synthetic_model, load_model, save_model};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "spinfer", version, about = "Sparse INT8 encoder inference: benchmarks and verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sparse vs dense GEMM over a shape x ratio x thread grid.
    Kernel(KernelArgs),
    /// Encoder throughput under a latency budget, unconstrained throughput
    /// and minimal latency.
    Model(ModelArgs),
    /// Run every correctness check; exit nonzero on the first failure.
    Verify(VerifyArgs),
    /// Write a synthetic model container.
    Gen(GenArgs),
}

#[derive(Args)]
struct Common {
    /// Sparsity ratios in [0, 1).
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS)]
    ratios: Vec<f64>,
    /// Thread counts.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THREADS)]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct Output {
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct Timed {
    /// Timed repetitions per cell (at least 3).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Untimed warm-up runs per cell (at least 1).
    #[arg(long, default_value_t = 1)]
    warmup: usize,
}

impl Timed {
    fn config(&self) -> anyhow::Result<TimingConfig> {
        if self.reps < 3 || self.warmup < 1 {
            bail!("--reps must be at least 3 and --warmup at least 1");
        }
        Ok(TimingConfig { reps: self.reps, warmup: self.warmup, ..TimingConfig::default() })
    }
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    timed: Timed,
    #[command(flatten)]
    output: Output,
    /// `MxKxN` shapes; the 90-shape grid when omitted.
    #[arg(long, value_delimiter = ',')]
    shapes: Vec<Shape>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    timed: Timed,
    #[command(flatten)]
    output: Output,
    /// bert-mini, distilbert, bert-base, bert-large or toy.
    #[arg(long, default_value = "bert-mini", conflicts_with = "model")]
    preset: String,
    /// Model container to benchmark instead of a synthetic preset.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 128])]
    seq_lens: Vec<usize>,
    /// Latency budget; the preset's when omitted.
    #[arg(long)]
    budget_ms: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BATCHES)]
    batches: Vec<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// `MxKxN` shapes; the 54-shape equivalence grid when omitted.
    #[arg(long, value_delimiter = ',')]
    shapes: Vec<Shape>,
    /// Flip one stored weight byte of the first grid cell after planning.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "bert-mini")]
    preset: String,
    #[arg(long, default_value_t = 0.9)]
    ratio: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn check_ratios(r: &[f64]) -> anyhow::Result<()> {
    if let Some(x) = r.iter().find(|x| !(0.0..1.0).contains(*x)) {
        bail!("ratio {x} outside [0, 1)");
    }
    if r.is_empty() {
        bail!("no ratios given");
    }
    Ok(())
}

fn check_threads(t: &[usize]) -> anyhow::Result<()> {
    if t.is_empty() || t.contains(&0) {
        bail!("thread counts must be positive");
    }
    Ok(())
}

fn lookup(name: &str) -> anyhow::Result<grid::ModelPreset> {
    preset(name).with_context(|| {
        let names: Vec<_> = grid::PRESETS.iter().map(|p| p.name).collect();
        format!("unknown preset `{name}` (known: {})", names.join(", "))
    })
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::Kernel(a) => {
            check_ratios(&a.common.ratios)?;
            check_threads(&a.common.threads)?;
            let cfg = KernelConfig {
                shapes: if a.shapes.is_empty() { benchmark_grid() } else { a.shapes },
                ratios: a.common.ratios,
                threads: a.common.threads,
                timing: a.timed.config()?,
                seed: a.common.seed,
                timed: true,
            };
            let r = bench_kernel(&cfg, None, |c| eprintln!("kernel {c}"));
            emit(&r.rows, a.output.format, a.output.out.as_deref())?;
            for f in &r.failures {
                eprintln!("FAIL {f}");
            }
            Ok(r.passed())
        }
        Cmd::Model(a) => {
            check_threads(&a.common.threads)?;
            if a.seq_lens.is_empty() || a.seq_lens.contains(&0) || a.batches.is_empty() || a.batches.contains(&0) {
                bail!("sequence lengths and batch sizes must be positive");
            }
            let (spec, budget) = match &a.model {
                Some(p) => {
                    let model = load_model(p).with_context(|| format!("loading {}", p.display()))?;
                    let name = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
                    (ModelSpec::Loaded { name, model }, None)
                }
                None => {
                    check_ratios(&a.common.ratios)?;
                    let p = lookup(&a.preset)?;
                    (ModelSpec::Synthetic { preset: p, ratios: a.common.ratios }, Some(p.budget_ms))
                }
            };
            let budget_ms = a.budget_ms.or(budget).context("--budget-ms is required with --model")?;
            if budget_ms <= 0.0 {
                bail!("--budget-ms must be positive");
            }
            let cfg = ModelBenchConfig {
                spec,
                seq_lens: a.seq_lens,
                budget_ms,
                threads: a.common.threads,
                batches: a.batches,
                timing: a.timed.config()?,
                seed: a.common.seed,
            };
            let r = bench_model(&cfg, |m| eprintln!("model {m}"))?;
            emit(&r.rows, a.output.format, a.output.out.as_deref())?;
            for f in &r.failures {
                eprintln!("FAIL {f}");
            }
            Ok(r.failures.is_empty())
        }
        Cmd::Verify(a) => {
            check_ratios(&a.common.ratios)?;
            check_threads(&a.common.threads)?;
            let cfg = VerifyConfig {
                shapes: if a.shapes.is_empty() { oracle_grid() } else { a.shapes },
                ratios: a.common.ratios,
                threads: a.common.threads,
                seed: a.common.seed,
                inject_fault: a.inject_fault,
            };
            let r = verify(&cfg, |s| eprintln!("verify: {s}"));
            for c in &r.checks {
                let first = c.detail.lines().next().unwrap_or("");
                println!("{} {}: {first}", if c.passed { "PASS" } else { "FAIL" }, c.name);
            }
            if let Some(ce) = &r.counterexample {
                println!("first counterexample (seed {}):\n{ce}", cfg.seed);
            }
            Ok(r.passed())
        }
        Cmd::Gen(a) => {
            let p = lookup(&a.preset)?;
            check_ratios(&[a.ratio])?;
            let m = generate_synthetic_model(p.layers, p.hidden, p.heads, p.intermediate, a.ratio, a.seed)?;
            save_model(&m, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
            eprintln!("wrote {} ({} layers, hidden {}, ratio {})", a.out.display(), p.layers, p.hidden, a.ratio);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
