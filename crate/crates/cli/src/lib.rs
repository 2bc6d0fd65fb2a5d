//! Benchmark and verification harness: kernel grid sweeps, end-to-end
//! encoder throughput under latency budgets, and the correctness gate.

pub mod alloc;
pub mod grid;
pub mod kernel;
pub mod model;
pub mod report;
pub mod timing;
pub mod verify;

pub use grid::{ModelPreset, Shape};
pub use kernel::{bench_kernel, KernelConfig, KernelReport, KernelRow};
pub use model::{bench_model, ModelBenchConfig, ModelRow};
pub use report::Format;
pub use timing::{Timing, TimingConfig};
pub use verify::{verify, VerifyConfig, VerifyReport};
