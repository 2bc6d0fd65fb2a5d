//! Random models for tests and benchmarks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{calibrate, EncoderConfig, EncoderModel, GraphError, LayerQuant, LayerWeights, LinearWeights};
use crate::sparse::{generate_pattern_weight, Sparse4x1Weight};
use crate::tensor::{compute_quant_params, quantize, Granularity, QuantDType, QuantParams, Tensor};

use super::ModelError;

/// Random encoder whose Linear weights follow the 4x1 pattern at
/// `ratio` sparsity, with activation quantization calibrated on a random
/// input. Deterministic for a given seed.
pub fn generate_synthetic_model(
    layers: usize,
    hidden: usize,
    heads: usize,
    intermediate: usize,
    ratio: f64,
    seed: u64,
) -> Result<EncoderModel, ModelError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(GraphError::Config(format!("sparsity ratio {ratio} must lie in [0, 1)")).into());
    }
    let config = EncoderConfig::new(layers, hidden, heads, intermediate);
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let linear = |m: usize, k: usize, rng: &mut ChaCha8Rng| -> Result<LinearWeights, ModelError> {
        let mask = generate_pattern_weight(m, k, ratio, rng.random());
        // Unit-variance outputs for unit-variance inputs.
        let c = 1.0 / ((1.0 - ratio) * k as f64).sqrt() as f32;
        let w: Vec<f32> = mask
            .as_s8()
            .expect("s8 pattern")
            .iter()
            .map(|&v| match v {
                0 => 0.0,
                v => v.signum() as f32 * rng.random_range(0.2f32..=1.0) * c,
            })
            .collect();
        let w = Tensor::from_f32([m, k], w).expect("shape matches");
        let q = compute_quant_params(&w, Granularity::PerOutputChannel, QuantDType::S8).map_err(GraphError::from)?;
        let s8 = quantize(&w, &q).map_err(GraphError::from)?;
        let weight = Sparse4x1Weight::encode(&s8)
            .and_then(|s| s.with_scales(q.scales.clone()))
            .map_err(|e| ModelError::InvalidTensor { name: "synthetic".into(), reason: e.to_string() })?;
        let bias: Arc<[f32]> = (0..m).map(|_| rng.random_range(-0.1f32..0.1)).collect();
        Ok(LinearWeights { weight: Arc::new(weight), bias })
    };
    let mut ws = Vec::with_capacity(layers);
    let (h, f) = (hidden, intermediate);
    for _ in 0..layers {
        let vec = |rng: &mut ChaCha8Rng, base: f32| -> Arc<[f32]> {
            (0..h).map(|_| base + rng.random_range(-0.1f32..0.1)).collect()
        };
        ws.push(LayerWeights {
            q: linear(h, h, &mut rng)?,
            k: linear(h, h, &mut rng)?,
            v: linear(h, h, &mut rng)?,
            o: linear(h, h, &mut rng)?,
            ffn1: linear(f, h, &mut rng)?,
            ffn2: linear(h, f, &mut rng)?,
            ln1_gamma: vec(&mut rng, 1.0),
            ln1_beta: vec(&mut rng, 0.0),
            ln2_gamma: vec(&mut rng, 1.0),
            ln2_beta: vec(&mut rng, 0.0),
        });
    }
    let unit = QuantParams::per_tensor(QuantDType::U8, 1.0, 0).expect("valid params");
    let lq = LayerQuant {
        input: unit.clone(),
        context: unit.clone(),
        ffn_in: unit.clone(),
        ffn_mid: unit.clone(),
        gelu_out: unit.clone(),
    };
    let mut model = EncoderModel { config, layers: ws, quant: vec![lq; layers], output: unit };
    let sample = random_input(1, 16, hidden, rng.random());
    calibrate(&mut model, &sample)?;
    Ok(model)
}

/// Uniform `[-sqrt(3), sqrt(3)]` (unit variance) hidden states.
pub fn random_input(batch: usize, seq: usize, hidden: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = 3f32.sqrt();
    let data = (0..batch * seq * hidden).map(|_| rng.random_range(-r..=r)).collect();
    Tensor::from_f32([batch, seq, hidden], data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_linear_hits_the_requested_ratio() {
        let m = generate_synthetic_model(2, 64, 4, 256, 0.9, 3).unwrap();
        for l in &m.layers {
            for lw in l.linears() {
                let w = &lw.weight;
                let block = 1.0 / (w.rows().div_ceil(4) * w.cols()) as f64;
                let got = w.sparsity_ratio();
                assert!((got - 0.9).abs() <= block + 1e-12, "{got}");
            }
        }
    }

    #[test]
    fn same_seed_same_model() {
        let a = generate_synthetic_model(1, 32, 2, 64, 0.7, 11).unwrap();
        assert_eq!(a, generate_synthetic_model(1, 32, 2, 64, 0.7, 11).unwrap());
        assert_ne!(a, generate_synthetic_model(1, 32, 2, 64, 0.7, 12).unwrap());
    }

    #[test]
    fn rejects_full_sparsity() {
        assert!(generate_synthetic_model(1, 16, 2, 32, 1.0, 0).is_err());
    }
}
