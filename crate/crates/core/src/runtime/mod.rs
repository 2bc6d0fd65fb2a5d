//! Execution-time resources: pooled activation memory, a static buffer
//! plan per graph, deduplicated weights and multi-instance serving.

mod buffer;
mod liveness;
mod weights;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::graph::{Executor, GraphError};
use crate::tensor::Tensor;

pub use buffer::{AlignedBuf, BufId, BufferPlanner, PoolStats, ALIGN};
pub use liveness::{plan_buffers, BufferPlan, Interval, Storage};
pub use weights::{WeightRegistry, WeightStats};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("buffer {0} released twice")]
    DoubleRelease(usize),
    #[error("buffer {0} was never acquired")]
    UnknownBuffer(usize),
    #[error("invalid thread topology: {0}")]
    Topology(String),
}

/// How cores are split between independent model instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadTopology {
    pub num_instances: usize,
    pub threads_per_instance: usize,
}

impl ThreadTopology {
    /// Checked against a budget of `cores`.
    pub fn new(num_instances: usize, threads_per_instance: usize, cores: usize) -> Result<Self, RuntimeError> {
        if num_instances == 0 || threads_per_instance == 0 {
            return Err(RuntimeError::Topology("instances and threads must be positive".into()));
        }
        let total = num_instances.saturating_mul(threads_per_instance);
        if total > cores {
            return Err(RuntimeError::Topology(format!(
                "{num_instances} x {threads_per_instance} threads exceed {cores} cores"
            )));
        }
        Ok(Self { num_instances, threads_per_instance })
    }

    pub fn available_cores() -> usize {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Serve `requests` with one OS thread per instance pulling from a shared
/// queue. Responses keep request order.
pub fn run_parallel_instances(
    instances: &mut [Executor],
    requests: &[Vec<Tensor>],
) -> Result<Vec<Vec<Tensor>>, GraphError> {
    if instances.is_empty() {
        return Err(RuntimeError::Topology("no instances".into()).into());
    }
    let next = AtomicUsize::new(0);
    type Slot = Option<Result<Vec<Tensor>, GraphError>>;
    let responses: Mutex<Vec<Slot>> = Mutex::new((0..requests.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for exec in instances.iter_mut() {
            let (next, responses) = (&next, &responses);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(i) else { break };
                let refs: Vec<&Tensor> = req.iter().collect();
                let out = exec.run(&refs);
                responses.lock().expect("response lock")[i] = Some(out);
            });
        }
    });
    responses.into_inner().expect("response lock").into_iter().map(|r| r.expect("every request is served")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_respects_budget() {
        assert!(ThreadTopology::new(2, 2, 4).is_ok());
        assert!(ThreadTopology::new(4, 2, 4).is_err());
        assert!(ThreadTopology::new(0, 1, 4).is_err());
    }
}
