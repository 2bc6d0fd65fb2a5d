//! Benchmark shape grids and model presets.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

/// One GEMM problem: weight `[M x K]` times activation `[K x N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Shape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl Shape {
    pub const fn new(m: usize, k: usize, n: usize) -> Self {
        Self { m, k, n }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.k, self.n)
    }
}

impl FromStr for Shape {
    type Err = String;

    /// `MxKxN`, every dimension positive.
    fn from_str(s: &str) -> Result<Self, String> {
        let dims: Vec<usize> = s
            .split(['x', 'X'])
            .map(|d| d.trim().parse::<usize>().map_err(|e| format!("bad dimension `{d}` in `{s}`: {e}")))
            .collect::<Result<_, _>>()?;
        match dims[..] {
            [m, k, n] if m > 0 && k > 0 && n > 0 => Ok(Self { m, k, n }),
            [_, _, _] => Err(format!("shape `{s}` has a zero dimension")),
            _ => Err(format!("shape `{s}` is not MxKxN")),
        }
    }
}

/// Weight shapes of the four reference encoders (BERT-Mini, DistilBERT and
/// BERT-Base, BERT-Large).
pub const WEIGHT_SHAPES: [(usize, usize); 9] = [
    (256, 256),
    (256, 1024),
    (1024, 256),
    (768, 768),
    (768, 3072),
    (3072, 768),
    (1024, 1024),
    (1024, 4096),
    (4096, 1024),
];

/// Token counts of the 90-shape benchmark grid.
pub const GRID_N: [usize; 10] = [16, 32, 48, 64, 96, 128, 192, 256, 320, 384];

/// Token counts of the equivalence grid.
pub const ORACLE_N: [usize; 6] = [16, 32, 64, 128, 256, 384];

pub const DEFAULT_RATIOS: [f64; 5] = [0.70, 0.75, 0.80, 0.85, 0.90];
pub const DEFAULT_THREADS: [usize; 2] = [1, 4];

fn cross(ns: &[usize]) -> Vec<Shape> {
    WEIGHT_SHAPES.iter().flat_map(|&(m, k)| ns.iter().map(move |&n| Shape { m, k, n })).collect()
}

/// The full 90-shape benchmark grid.
pub fn benchmark_grid() -> Vec<Shape> {
    cross(&GRID_N)
}

/// The 54-shape grid every equivalence sweep covers.
pub fn oracle_grid() -> Vec<Shape> {
    cross(&ORACLE_N)
}

/// Encoder topology plus the latency budget used for constrained
/// throughput.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelPreset {
    pub name: &'static str,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub budget_ms: f64,
}

pub const PRESETS: [ModelPreset; 5] = [
    ModelPreset { name: "bert-mini", layers: 4, hidden: 256, heads: 4, intermediate: 1024, budget_ms: 1.0 },
    ModelPreset { name: "distilbert", layers: 6, hidden: 768, heads: 12, intermediate: 3072, budget_ms: 10.0 },
    ModelPreset { name: "bert-base", layers: 12, hidden: 768, heads: 12, intermediate: 3072, budget_ms: 20.0 },
    ModelPreset { name: "bert-large", layers: 24, hidden: 1024, heads: 16, intermediate: 4096, budget_ms: 50.0 },
    // Small enough for smoke tests.
    ModelPreset { name: "toy", layers: 2, hidden: 64, heads: 4, intermediate: 256, budget_ms: 5.0 },
];

/// Case-insensitive lookup; `-` and `_` are optional.
pub fn preset(name: &str) -> Option<ModelPreset> {
    let norm = |s: &str| s.to_ascii_lowercase().replace(['-', '_'], "");
    let want = norm(name);
    PRESETS.iter().copied().find(|p| norm(p.name) == want)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_the_documented_sizes() {
        let g = benchmark_grid();
        assert_eq!(g.len(), 90);
        let mut uniq = g.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 90);
        assert_eq!(oracle_grid().len(), 54);
    }

    #[test]
    fn shapes_parse_and_print() {
        let s: Shape = "768x3072x384".parse().unwrap();
        assert_eq!(s, Shape::new(768, 3072, 384));
        assert_eq!(s.to_string().parse::<Shape>().unwrap(), s);
        assert!("0x4x4".parse::<Shape>().is_err());
        assert!("4x4".parse::<Shape>().is_err());
        assert!("4xax4".parse::<Shape>().is_err());
    }

    #[test]
    fn preset_budgets() {
        let ms: Vec<f64> = ["BERT-Mini", "distilbert", "bert_base", "bertlarge"]
            .iter()
            .map(|n| preset(n).unwrap().budget_ms)
            .collect();
        assert_eq!(ms, [1.0, 10.0, 20.0, 50.0]);
        assert_eq!(preset("bert-large").unwrap().layers, 24);
        assert!(preset("gpt").is_none());
    }

    #[test]
    fn preset_layers_and_weight_shapes() {
        let layers: Vec<usize> = PRESETS[..4].iter().map(|p| p.layers).collect();
        assert_eq!(layers, [4, 6, 12, 24]);
        for p in &PRESETS[..4] {
            for shape in [(p.hidden, p.hidden), (p.hidden, p.intermediate), (p.intermediate, p.hidden)] {
                assert!(WEIGHT_SHAPES.contains(&shape), "{} uses {shape:?}", p.name);
            }
        }
    }
}
