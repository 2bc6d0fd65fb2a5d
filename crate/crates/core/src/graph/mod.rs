//! Computation graphs: tensors, operators, category classification,
//! post-op fusion, encoder construction and execution.
//!
//! A [`Graph`] stores nodes in schedule order; every node produces one
//! tensor named after the node. Activations are token-major (`[.., features]`),
//! so a `Linear` consumes `[.., K]` and produces `[.., M]`.

mod encoder;
mod exec;
mod fusion;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::dense_ops::bmm_dims;
use crate::kernels::{Epilogue, KernelError, PostOp};
use crate::lut::LutError;
use crate::sparse::Sparse4x1Weight;
use crate::tensor::{DType, QuantDType, QuantParams, TensorError};

pub use encoder::{
    build_attention, build_encoder, calibrate, encoder_forward_f32, EncoderConfig, EncoderModel, ForwardTrace,
    LayerQuant, LayerTrace, LayerWeights, LinearWeights,
};
pub use exec::{execute, Executor};
pub use fusion::{compile_luts, fuse_post_ops, optimize};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{0}` is defined twice")]
    Redefined(String),
    #[error("node `{node}`: {msg}")]
    Invalid { node: String, msg: String },
    #[error("missing graph input `{0}`")]
    MissingInput(String),
    #[error("input `{name}`: expected {expected:?} {shape:?}, got {got_dtype:?} {got_shape:?}")]
    InputMismatch { name: String, expected: DType, shape: Vec<usize>, got_dtype: DType, got_shape: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Runtime(#[from] crate::runtime::RuntimeError),
}

/// Edge metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub quant: Option<QuantParams>,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * self.dtype.size_of()
    }

    fn last(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Output domain of a Linear before its post-op chain.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearOutput {
    F32,
    Quantized(QuantParams),
}

/// Ops fused into a Linear. `PostOp::Add(slot)` reads `sides[slot]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PostOpChain {
    pub ops: Vec<PostOp>,
    pub sides: Vec<String>,
    /// Names of the absorbed nodes, in graph order.
    pub fused: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Sparse INT8 Linear with S32 bias.
    Linear {
        weight: Arc<Sparse4x1Weight>,
        bias: Arc<[i32]>,
        output: LinearOutput,
        post: PostOpChain,
    },
    BatchMatmul {
        alpha: f32,
        transpose_b: bool,
    },
    Softmax,
    LayerNorm {
        gamma: Arc<[f32]>,
        beta: Arc<[f32]>,
        eps: f32,
    },
    Gelu,
    Quantize(QuantParams),
    Dequantize(QuantParams),
    /// Per-feature bias over the last axis.
    BiasAdd(Arc<[f32]>),
    Sum,
    Reshape {
        shape: Vec<usize>,
    },
    Transpose {
        perm: Vec<usize>,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Linear { .. } => "Linear",
            OpKind::BatchMatmul { .. } => "BatchMatmul",
            OpKind::Softmax => "Softmax",
            OpKind::LayerNorm { .. } => "LayerNorm",
            OpKind::Gelu => "GeLU",
            OpKind::Quantize(_) => "Quantize",
            OpKind::Dequantize(_) => "Dequantize",
            OpKind::BiasAdd(_) => "BiasAdd",
            OpKind::Sum => "Sum",
            OpKind::Reshape { .. } => "Reshape",
            OpKind::Transpose { .. } => "Transpose",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::BatchMatmul { .. } | OpKind::Sum => 2,
            _ => 1,
        }
    }
}

/// Fusion category of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCategory {
    ElementWise,
    Binary,
    ShapeManipulation,
    Compute,
}

pub fn classify(kind: &OpKind) -> OpCategory {
    match kind {
        OpKind::Gelu | OpKind::Quantize(_) | OpKind::Dequantize(_) | OpKind::BiasAdd(_) => OpCategory::ElementWise,
        OpKind::Sum => OpCategory::Binary,
        OpKind::Reshape { .. } | OpKind::Transpose { .. } => OpCategory::ShapeManipulation,
        OpKind::Linear { .. } | OpKind::BatchMatmul { .. } | OpKind::Softmax | OpKind::LayerNorm { .. } => {
            OpCategory::Compute
        }
    }
}

/// A transpose that only moves size-1 axes leaves memory order unchanged.
pub fn is_metadata_transpose(shape: &[usize], perm: &[usize]) -> bool {
    let moved: Vec<usize> = perm.iter().copied().filter(|&a| shape[a] != 1).collect();
    moved.windows(2).all(|w| w[0] < w[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: OpKind,
    /// Primary operands first; a fused Linear lists its side inputs after
    /// its activation.
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    tensors: BTreeMap<String, TensorInfo>,
    nodes: Vec<Node>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorInfo, GraphError> {
        self.tensors.get(name).ok_or_else(|| GraphError::UnknownTensor(name.to_string()))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorInfo> {
        self.tensors.values()
    }

    /// Indices of the nodes reading `tensor`.
    pub fn consumers(&self, tensor: &str) -> Vec<usize> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.inputs.iter().any(|i| i == tensor)).map(|(i, _)| i).collect()
    }

    /// Index of the node producing `tensor` (`None` for graph inputs).
    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.output == tensor)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.kind.name() == kind).count()
    }

    /// Epilogue a Linear node runs with, derived from its input quantization,
    /// output domain and post-op chain.
    pub fn linear_epilogue(&self, node: &Node) -> Result<Epilogue, GraphError> {
        let OpKind::Linear { weight, output, post, .. } = &node.kind else {
            return Err(invalid(node, "not a Linear"));
        };
        let input = self.tensor(&node.inputs[0])?;
        let a = input.quant.as_ref().ok_or_else(|| invalid(node, "activation has no quantization"))?;
        let mut epi = match output {
            LinearOutput::F32 => Epilogue::dequantize(a.scale(), weight.scales())?,
            LinearOutput::Quantized(q) => Epilogue::requantize(a.scale(), weight.scales(), q.clone())?,
        };
        for op in &post.ops {
            epi = epi.then(op.clone())?;
        }
        Ok(epi)
    }

    /// Check definitions, ordering, arity and shapes.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut defined: Vec<&str> = self.inputs.iter().map(String::as_str).collect();
        for name in &self.inputs {
            self.tensor(name)?;
        }
        for node in &self.nodes {
            let extra = match &node.kind {
                OpKind::Linear { post, .. } => post.sides.len(),
                _ => 0,
            };
            if node.inputs.len() != node.kind.arity() + extra {
                return Err(invalid(
                    node,
                    format!("expects {} inputs, has {}", node.kind.arity() + extra, node.inputs.len()),
                ));
            }
            for i in &node.inputs {
                if !defined.contains(&i.as_str()) {
                    return Err(invalid(node, format!("reads `{i}` before it is produced")));
                }
            }
            if defined.contains(&node.output.as_str()) {
                return Err(GraphError::Redefined(node.output.clone()));
            }
            let infos: Vec<&TensorInfo> = node.inputs.iter().map(|i| self.tensor(i)).collect::<Result<_, _>>()?;
            let out = self.tensor(&node.output)?;
            self.check_node(node, &infos, out)?;
            defined.push(&node.output);
        }
        for o in &self.outputs {
            if !defined.contains(&o.as_str()) {
                return Err(GraphError::UnknownTensor(o.clone()));
            }
        }
        Ok(())
    }

    fn check_node(&self, node: &Node, ins: &[&TensorInfo], out: &TensorInfo) -> Result<(), GraphError> {
        if let OpKind::Linear { weight, post, .. } = &node.kind {
            let x = ins[0];
            let tokens = x.numel() / weight.cols();
            let epi = self.linear_epilogue(node)?;
            if x.dtype != DType::U8 || x.last() != weight.cols() {
                return Err(invalid(node, format!("activation must be U8 [.., {}]", weight.cols())));
            }
            if out.numel() != tokens * weight.rows()
                || out.dtype != epi.out_dtype()
                || out.quant.as_ref() != epi.out_quant()
            {
                return Err(invalid(node, "output metadata does not match the epilogue"));
            }
            for s in &ins[1..] {
                if s.dtype != DType::F32 || s.numel() != out.numel() {
                    return Err(invalid(
                        node,
                        format!("side input `{}` must be F32 with {} elements", s.name, out.numel()),
                    ));
                }
            }
            if epi.num_sides() > post.sides.len() {
                return Err(invalid(node, "chain reads a missing side input"));
            }
            return Ok(());
        }
        let want = infer(node, ins)?;
        if want.shape != out.shape || want.dtype != out.dtype || want.quant != out.quant {
            return Err(invalid(
                node,
                format!(
                    "output {:?} {:?} disagrees with inferred {:?} {:?}",
                    out.dtype, out.shape, want.dtype, want.shape
                ),
            ));
        }
        Ok(())
    }
}

fn invalid(node: &Node, msg: impl Into<String>) -> GraphError {
    GraphError::Invalid { node: node.name.clone(), msg: msg.into() }
}

fn need(node: &Node, ok: bool, msg: &str) -> Result<(), GraphError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(node, msg))
    }
}

/// Output metadata of a non-fused node.
fn infer(node: &Node, ins: &[&TensorInfo]) -> Result<TensorInfo, GraphError> {
    let x = ins[0];
    let mk = |shape: Vec<usize>, dtype: DType, quant: Option<QuantParams>| TensorInfo {
        name: node.output.clone(),
        shape,
        dtype,
        quant,
    };
    let f32_in = |t: &TensorInfo| need(node, t.dtype == DType::F32, "expects F32 input");
    match &node.kind {
        OpKind::Linear { weight, output, .. } => {
            need(node, x.dtype == DType::U8 && x.last() == weight.cols(), "Linear expects U8 [.., K]")?;
            need(node, x.quant.as_ref().is_some_and(|q| q.is_per_tensor()), "Linear input needs per-tensor quant")?;
            let mut shape = x.shape.clone();
            *shape.last_mut().expect("non-empty") = weight.rows();
            Ok(match output {
                LinearOutput::F32 => mk(shape, DType::F32, None),
                LinearOutput::Quantized(q) => mk(shape, q.dtype.dtype(), Some(q.clone())),
            })
        }
        OpKind::BatchMatmul { transpose_b, .. } => {
            f32_in(x)?;
            f32_in(ins[1])?;
            let (_, shape) = bmm_dims(&x.shape, &ins[1].shape, *transpose_b)?;
            Ok(mk(shape, DType::F32, None))
        }
        OpKind::Softmax | OpKind::Gelu => {
            f32_in(x)?;
            Ok(mk(x.shape.clone(), DType::F32, None))
        }
        OpKind::LayerNorm { gamma, beta, .. } => {
            f32_in(x)?;
            need(node, gamma.len() == x.last() && beta.len() == x.last(), "gamma/beta size")?;
            Ok(mk(x.shape.clone(), DType::F32, None))
        }
        OpKind::BiasAdd(b) => {
            f32_in(x)?;
            need(node, b.len() == x.last(), "bias size must equal the last axis")?;
            Ok(mk(x.shape.clone(), DType::F32, None))
        }
        OpKind::Quantize(q) => {
            f32_in(x)?;
            need(node, q.is_per_tensor(), "per-tensor quantization only")?;
            Ok(mk(x.shape.clone(), q.dtype.dtype(), Some(q.clone())))
        }
        OpKind::Dequantize(q) => {
            need(node, x.quant.as_ref() == Some(q), "dequantize params must match the input")?;
            Ok(mk(x.shape.clone(), DType::F32, None))
        }
        OpKind::Sum => {
            f32_in(x)?;
            f32_in(ins[1])?;
            need(node, x.shape == ins[1].shape, "Sum operands must have equal shapes")?;
            Ok(mk(x.shape.clone(), DType::F32, None))
        }
        OpKind::Reshape { shape } => {
            need(node, shape.iter().product::<usize>() == x.numel(), "reshape must keep the element count")?;
            Ok(mk(shape.clone(), x.dtype, x.quant.clone()))
        }
        OpKind::Transpose { perm } => {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            need(node, sorted == (0..x.shape.len()).collect::<Vec<_>>(), "perm must be a permutation of the axes")?;
            Ok(mk(perm.iter().map(|&a| x.shape[a]).collect(), x.dtype, x.quant.clone()))
        }
    }
}

/// Incremental graph construction with shape inference.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    g: Graph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(
        &mut self,
        name: &str,
        shape: &[usize],
        dtype: DType,
        quant: Option<QuantParams>,
    ) -> Result<String, GraphError> {
        if self.g.tensors.contains_key(name) {
            return Err(GraphError::Redefined(name.into()));
        }
        if let Some(q) = &quant {
            q.validate()?;
            if QuantDType::from_dtype(dtype) != Some(q.dtype) {
                return Err(GraphError::Config(format!("input `{name}` quant dtype does not match {dtype:?}")));
            }
        }
        let info = TensorInfo { name: name.into(), shape: shape.to_vec(), dtype, quant };
        self.g.tensors.insert(name.into(), info);
        self.g.inputs.push(name.into());
        Ok(name.into())
    }

    /// Append a node; its output tensor is named `name`.
    pub fn node(&mut self, name: &str, kind: OpKind, inputs: &[&str]) -> Result<String, GraphError> {
        if self.g.tensors.contains_key(name) {
            return Err(GraphError::Redefined(name.into()));
        }
        let node = Node {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: name.into(),
        };
        if node.inputs.len() != node.kind.arity() {
            return Err(invalid(&node, format!("expects {} inputs", node.kind.arity())));
        }
        let infos: Vec<&TensorInfo> = node.inputs.iter().map(|i| self.g.tensor(i)).collect::<Result<_, _>>()?;
        let info = infer(&node, &infos)?;
        self.g.tensors.insert(name.into(), info);
        self.g.nodes.push(node);
        Ok(name.into())
    }

    pub fn shape_of(&self, name: &str) -> Result<Vec<usize>, GraphError> {
        Ok(self.g.tensor(name)?.shape.clone())
    }

    pub fn output(&mut self, name: &str) -> Result<(), GraphError> {
        self.g.tensor(name)?;
        self.g.outputs.push(name.into());
        Ok(())
    }

    pub fn finish(self) -> Result<Graph, GraphError> {
        self.g.validate()?;
        Ok(self.g)
    }
}
