//! Transformer encoder graphs and the float reference they are calibrated
//! against.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kernels::{batch_matmul_f32, gelu_f32, layer_norm_f32, softmax_f32};
use crate::runtime::WeightRegistry;
use crate::sparse::Sparse4x1Weight;
use crate::tensor::{compute_quant_params, DType, Granularity, QuantDType, QuantParams, Tensor};

use super::exec::transpose_copy;
use super::{Graph, GraphBuilder, GraphError, LinearOutput, OpKind, PostOpChain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    /// Longest sequence a graph may be built for.
    pub max_seq: usize,
    pub eps: f32,
}

impl EncoderConfig {
    pub fn new(layers: usize, hidden: usize, heads: usize, intermediate: usize) -> Self {
        Self { layers, hidden, heads, intermediate, max_seq: 512, eps: 1e-5 }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.intermediate == 0 || self.max_seq == 0 {
            return Err(GraphError::Config("encoder dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(GraphError::Config(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(GraphError::Config("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Sparse INT8 weight with an f32 bias. The bias is folded into the S32
/// accumulator domain when a graph is built, using the input scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub weight: Arc<Sparse4x1Weight>,
    pub bias: Arc<[f32]>,
}

impl LinearWeights {
    /// `bias[m] / (a_scale * w_scale[m])`, rounded half to even.
    pub fn folded_bias(&self, a_scale: f32) -> Arc<[i32]> {
        self.bias
            .iter()
            .zip(self.weight.scales())
            .map(|(&b, &s)| {
                (b as f64 / (a_scale as f64 * s as f64)).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64)
                    as i32
            })
            .collect()
    }

    /// Row-major `[M x K]` float weight.
    pub fn dequantized(&self) -> Result<Vec<f32>, GraphError> {
        let w = self.weight.decode().map_err(crate::kernels::KernelError::from)?;
        let k = self.weight.cols();
        Ok(w.as_s8()?.iter().enumerate().map(|(i, &v)| v as f32 * self.weight.scales()[i / k]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub q: LinearWeights,
    pub k: LinearWeights,
    pub v: LinearWeights,
    pub o: LinearWeights,
    pub ffn1: LinearWeights,
    pub ffn2: LinearWeights,
    pub ln1_gamma: Arc<[f32]>,
    pub ln1_beta: Arc<[f32]>,
    pub ln2_gamma: Arc<[f32]>,
    pub ln2_beta: Arc<[f32]>,
}

impl LayerWeights {
    pub fn linears(&self) -> [&LinearWeights; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ffn1, &self.ffn2]
    }

    pub fn linears_mut(&mut self) -> [&mut LinearWeights; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.ffn1, &mut self.ffn2]
    }
}

/// Activation quantization of one layer (all per-tensor U8).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    /// Layer input, consumed by the Q/K/V projections.
    pub input: QuantParams,
    /// Attention context, consumed by the output projection.
    pub context: QuantParams,
    /// First LayerNorm output, consumed by the first FFN Linear.
    pub ffn_in: QuantParams,
    /// First FFN Linear output.
    pub ffn_mid: QuantParams,
    /// GeLU output, consumed by the second FFN Linear.
    pub gelu_out: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub layers: Vec<LayerWeights>,
    pub quant: Vec<LayerQuant>,
    /// Quantization of the final hidden states.
    pub output: QuantParams,
}

impl EncoderModel {
    pub fn validate(&self) -> Result<(), GraphError> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.layers || self.quant.len() != c.layers {
            return Err(GraphError::Config("layer count does not match the config".into()));
        }
        let (h, f) = (c.hidden, c.intermediate);
        for (i, l) in self.layers.iter().enumerate() {
            let dims = [(h, h), (h, h), (h, h), (h, h), (f, h), (h, f)];
            for (lw, (m, k)) in l.linears().into_iter().zip(dims) {
                if lw.weight.rows() != m || lw.weight.cols() != k || lw.bias.len() != m {
                    return Err(GraphError::Config(format!("layer {i}: expected a {m}x{k} Linear")));
                }
            }
            if [&l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta].iter().any(|v| v.len() != h) {
                return Err(GraphError::Config(format!("layer {i}: LayerNorm vectors must have {h} entries")));
            }
        }
        let q = self.quant.iter().flat_map(|q| [&q.input, &q.context, &q.ffn_in, &q.ffn_mid, &q.gelu_out]);
        for p in q.chain([&self.output]) {
            p.validate()?;
            if !p.is_per_tensor() || p.dtype != QuantDType::U8 {
                return Err(GraphError::Config("activation quantization must be per-tensor U8".into()));
            }
        }
        Ok(())
    }

    /// Bytes of sparse weight storage, each Linear counted once.
    pub fn weight_bytes(&self) -> usize {
        self.layers.iter().flat_map(|l| l.linears()).map(|l| l.weight.storage_bytes()).sum()
    }

    /// Route every weight through `registry` so identical weights share
    /// one allocation.
    pub fn share_weights(&mut self, registry: &WeightRegistry) {
        for l in &mut self.layers {
            for lw in l.linears_mut() {
                lw.weight = registry.register(lw.weight.clone());
            }
        }
    }
}

fn linear(lw: &LinearWeights, input: &QuantParams, output: LinearOutput) -> OpKind {
    OpKind::Linear {
        weight: lw.weight.clone(),
        bias: lw.folded_bias(input.scale()),
        output,
        post: PostOpChain::default(),
    }
}

/// Self-attention block over F32 hidden states `x` `[B, S, H]`. Returns the
/// residual sum `x + attention(x)` ahead of the first LayerNorm.
#[allow(clippy::too_many_arguments)]
pub fn build_attention(
    b: &mut GraphBuilder,
    prefix: &str,
    x: &str,
    cfg: &EncoderConfig,
    lw: &LayerWeights,
    lq: &LayerQuant,
    batch: usize,
    seq: usize,
) -> Result<String, GraphError> {
    let (h, d) = (cfg.heads, cfg.head_dim());
    let n = |s: &str| format!("{prefix}{s}");
    let xq = b.node(&n("x_q"), OpKind::Quantize(lq.input.clone()), &[x])?;
    let mut heads = Vec::new();
    for (tag, w) in [("q", &lw.q), ("k", &lw.k), ("v", &lw.v)] {
        let p = b.node(&n(tag), linear(w, &lq.input, LinearOutput::F32), &[&xq])?;
        let r = b.node(&n(&format!("{tag}_split")), OpKind::Reshape { shape: vec![batch, seq, h, d] }, &[&p])?;
        heads.push(b.node(&n(&format!("{tag}_heads")), OpKind::Transpose { perm: vec![0, 2, 1, 3] }, &[&r])?);
    }
    let alpha = 1.0 / (d as f32).sqrt();
    let scores = b.node(&n("scores"), OpKind::BatchMatmul { alpha, transpose_b: true }, &[&heads[0], &heads[1]])?;
    let probs = b.node(&n("probs"), OpKind::Softmax, &[&scores])?;
    let ctx = b.node(&n("ctx"), OpKind::BatchMatmul { alpha: 1.0, transpose_b: false }, &[&probs, &heads[2]])?;
    let ctx = b.node(&n("ctx_merge"), OpKind::Transpose { perm: vec![0, 2, 1, 3] }, &[&ctx])?;
    let ctx = b.node(&n("ctx_flat"), OpKind::Reshape { shape: vec![batch, seq, cfg.hidden] }, &[&ctx])?;
    let ctx_q = b.node(&n("ctx_q"), OpKind::Quantize(lq.context.clone()), &[&ctx])?;
    let o = b.node(&n("o"), linear(&lw.o, &lq.context, LinearOutput::F32), &[&ctx_q])?;
    b.node(&n("attn_res"), OpKind::Sum, &[&o, x])
}

/// Unfused encoder graph for `[batch, seq, hidden]` F32 input `x`, producing
/// U8 hidden states `y`.
pub fn build_encoder(model: &EncoderModel, batch: usize, seq: usize) -> Result<Graph, GraphError> {
    model.validate()?;
    if batch == 0 || seq == 0 || seq > model.config.max_seq {
        return Err(GraphError::Config(format!("sequence length {seq} outside 1..={}", model.config.max_seq)));
    }
    let cfg = &model.config;
    let mut b = GraphBuilder::new();
    let mut x = b.input("x", &[batch, seq, cfg.hidden], DType::F32, None)?;
    for (i, (lw, lq)) in model.layers.iter().zip(&model.quant).enumerate() {
        let p = format!("l{i}.");
        let n = |s: &str| format!("{p}{s}");
        let res = build_attention(&mut b, &p, &x, cfg, lw, lq, batch, seq)?;
        let ln1 = b.node(
            &n("ln1"),
            OpKind::LayerNorm { gamma: lw.ln1_gamma.clone(), beta: lw.ln1_beta.clone(), eps: cfg.eps },
            &[&res],
        )?;
        let h_q = b.node(&n("ffn_in_q"), OpKind::Quantize(lq.ffn_in.clone()), &[&ln1])?;
        let f1 =
            b.node(&n("ffn1"), linear(&lw.ffn1, &lq.ffn_in, LinearOutput::Quantized(lq.ffn_mid.clone())), &[&h_q])?;
        let f1d = b.node(&n("ffn1_dq"), OpKind::Dequantize(lq.ffn_mid.clone()), &[&f1])?;
        let g = b.node(&n("gelu"), OpKind::Gelu, &[&f1d])?;
        let g_q = b.node(&n("gelu_q"), OpKind::Quantize(lq.gelu_out.clone()), &[&g])?;
        let f2 = b.node(&n("ffn2"), linear(&lw.ffn2, &lq.gelu_out, LinearOutput::F32), &[&g_q])?;
        let res2 = b.node(&n("ffn_res"), OpKind::Sum, &[&f2, &ln1])?;
        x = b.node(
            &n("ln2"),
            OpKind::LayerNorm { gamma: lw.ln2_gamma.clone(), beta: lw.ln2_beta.clone(), eps: cfg.eps },
            &[&res2],
        )?;
    }
    let y = b.node("y", OpKind::Quantize(model.output.clone()), &[&x])?;
    b.output(&y)?;
    b.finish()
}

/// Float activations at every quantization point of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Tensor,
    pub context: Tensor,
    pub ffn_in: Tensor,
    pub ffn_mid: Tensor,
    pub gelu_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub output: Tensor,
}

fn linear_f32(x: &Tensor, lw: &LinearWeights) -> Result<Tensor, GraphError> {
    let (m, k) = (lw.weight.rows(), lw.weight.cols());
    let w = Tensor::from_f32([1, m, k], lw.dequantized()?)?;
    let tokens = x.numel() / k;
    let xs = x.clone().reshape([1, tokens, k])?;
    let y = batch_matmul_f32(&xs, &w, true, 1.0)?;
    let mut data = y.into_data();
    if let crate::tensor::TensorData::F32(v) = &mut data {
        for row in v.chunks_exact_mut(m) {
            row.iter_mut().zip(lw.bias.iter()).for_each(|(o, b)| *o += b);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty") = m;
    Ok(Tensor::new(shape, data)?)
}

fn permute_f32(x: &Tensor, perm: &[usize]) -> Result<Tensor, GraphError> {
    let src = x.as_f32()?;
    let mut out = vec![0.0; src.len()];
    transpose_copy(src, x.shape(), perm, &mut out);
    Ok(Tensor::from_f32(perm.iter().map(|&a| x.shape()[a]).collect::<Vec<_>>(), out)?)
}

fn add_f32(a: &Tensor, b: &Tensor) -> Result<Tensor, GraphError> {
    let v = a.as_f32()?.iter().zip(b.as_f32()?).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_f32(a.shape().to_vec(), v)?)
}

/// Float forward pass with dequantized weights and no activation
/// quantization, recording every tensor that gets quantized.
pub fn encoder_forward_f32(model: &EncoderModel, x: &Tensor) -> Result<ForwardTrace, GraphError> {
    let cfg = &model.config;
    cfg.validate()?;
    let &[batch, seq, hidden] = x.shape() else {
        return Err(GraphError::Config(format!("expected [batch, seq, hidden] input, got {:?}", x.shape())));
    };
    if hidden != cfg.hidden {
        return Err(GraphError::Config(format!("input hidden size {hidden} != {}", cfg.hidden)));
    }
    let (h, d) = (cfg.heads, cfg.head_dim());
    let mut x = x.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    for lw in &model.layers {
        let split =
            |t: Tensor| -> Result<Tensor, GraphError> { permute_f32(&t.reshape([batch, seq, h, d])?, &[0, 2, 1, 3]) };
        let q = split(linear_f32(&x, &lw.q)?)?;
        let k = split(linear_f32(&x, &lw.k)?)?;
        let v = split(linear_f32(&x, &lw.v)?)?;
        let probs = softmax_f32(&batch_matmul_f32(&q, &k, true, 1.0 / (d as f32).sqrt())?)?;
        let ctx = batch_matmul_f32(&probs, &v, false, 1.0)?;
        let context = permute_f32(&ctx, &[0, 2, 1, 3])?.reshape([batch, seq, hidden])?;
        let res = add_f32(&linear_f32(&context, &lw.o)?, &x)?;
        let ffn_in = layer_norm_f32(&res, &lw.ln1_gamma, &lw.ln1_beta, cfg.eps)?;
        let ffn_mid = linear_f32(&ffn_in, &lw.ffn1)?;
        let gelu_out = gelu_f32(&ffn_mid)?;
        let res2 = add_f32(&linear_f32(&gelu_out, &lw.ffn2)?, &ffn_in)?;
        let next = layer_norm_f32(&res2, &lw.ln2_gamma, &lw.ln2_beta, cfg.eps)?;
        layers.push(LayerTrace { input: x, context, ffn_in, ffn_mid, gelu_out });
        x = next;
    }
    Ok(ForwardTrace { layers, output: x })
}

/// Set every activation quantization from min/max ranges observed on
/// `sample`.
pub fn calibrate(model: &mut EncoderModel, sample: &Tensor) -> Result<(), GraphError> {
    let trace = encoder_forward_f32(model, sample)?;
    let u8q = |t: &Tensor| compute_quant_params(t, Granularity::PerTensor, QuantDType::U8);
    model.quant = trace
        .layers
        .iter()
        .map(|l| {
            Ok(LayerQuant {
                input: u8q(&l.input)?,
                context: u8q(&l.context)?,
                ffn_in: u8q(&l.ffn_in)?,
                ffn_mid: u8q(&l.ffn_mid)?,
                gelu_out: u8q(&l.gelu_out)?,
            })
        })
        .collect::<Result<_, GraphError>>()?;
    model.output = u8q(&trace.output)?;
    Ok(())
}
