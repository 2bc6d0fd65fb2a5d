//! Post-op fusion.
//!
//! Starting from every Linear, a depth-first walk follows the single-consumer
//! chain below it and absorbs element-wise ops, residual `Sum`s and
//! metadata-only shape changes into the Linear's epilogue. A second pass
//! collapses `Dequantize .. Quantize` windows of the fused chains into
//! 8-bit lookup tables.

use std::sync::Arc;

use crate::kernels::PostOp;
use crate::lut::build_lut;

use super::{classify, is_metadata_transpose, Graph, GraphError, Node, OpCategory, OpKind};

/// Fusion followed by LUT compilation.
pub fn optimize(g: &Graph) -> Result<Graph, GraphError> {
    compile_luts(&fuse_post_ops(g)?)
}

pub fn fuse_post_ops(g: &Graph) -> Result<Graph, GraphError> {
    let mut g = g.clone();
    let mut i = 0;
    while i < g.nodes.len() {
        if matches!(g.nodes[i].kind, OpKind::Linear { .. }) {
            absorb_chain(&mut g, i)?;
        }
        i += 1;
    }
    g.validate()?;
    Ok(g)
}

/// The single node reading `tensor`, unless it is also a graph output.
fn sole_consumer(g: &Graph, tensor: &str) -> Option<usize> {
    if g.outputs.iter().any(|o| o == tensor) {
        return None;
    }
    match g.consumers(tensor).as_slice() {
        [c] => Some(*c),
        _ => None,
    }
}

fn absorb_chain(g: &mut Graph, li: usize) -> Result<(), GraphError> {
    let mut epi = g.linear_epilogue(&g.nodes[li])?;
    let m = match &g.nodes[li].kind {
        OpKind::Linear { weight, .. } => weight.rows(),
        _ => unreachable!(),
    };
    let mut cur = g.nodes[li].output.clone();
    let mut absorbed: Vec<usize> = Vec::new();
    let mut new_ops: Vec<PostOp> = Vec::new();
    let mut new_sides: Vec<String> = Vec::new();
    let base_sides = match &g.nodes[li].kind {
        OpKind::Linear { post, .. } => post.sides.len(),
        _ => 0,
    };

    while let Some(ci) = sole_consumer(g, &cur) {
        let node = &g.nodes[ci];
        let shape = &g.tensors[&cur].shape;
        let op = match &node.kind {
            k if classify(k) == OpCategory::Compute => break,
            OpKind::Reshape { .. } => None,
            OpKind::Transpose { perm } if is_metadata_transpose(shape, perm) => None,
            OpKind::Transpose { .. } => break,
            OpKind::BiasAdd(_) if shape.last() != Some(&m) => break,
            OpKind::BiasAdd(b) => Some(PostOp::BiasAdd(b.clone())),
            OpKind::Gelu => Some(PostOp::Gelu),
            OpKind::Quantize(q) => Some(PostOp::Quantize(q.clone())),
            OpKind::Dequantize(q) => Some(PostOp::Dequantize(q.clone())),
            OpKind::Sum => {
                let other = if node.inputs[0] == cur { &node.inputs[1] } else { &node.inputs[0] };
                // The side operand must exist when the Linear runs.
                let ready = g.producer(other).is_none_or(|p| p < li);
                if *other == cur || !ready {
                    break;
                }
                new_sides.push(other.clone());
                Some(PostOp::Add(base_sides + new_sides.len() - 1))
            }
            _ => break,
        };
        if let Some(op) = op {
            match epi.clone().then(op.clone()) {
                Ok(e) => epi = e,
                Err(_) => {
                    if matches!(op, PostOp::Add(_)) {
                        new_sides.pop();
                    }
                    break;
                }
            }
            new_ops.push(op);
        }
        absorbed.push(ci);
        cur = g.nodes[ci].output.clone();
    }
    if absorbed.is_empty() {
        return Ok(());
    }

    let removed: Vec<Node> = absorbed.iter().map(|&i| g.nodes[i].clone()).collect();
    let linear = &mut g.nodes[li];
    let old_out = std::mem::replace(&mut linear.output, cur.clone());
    if let OpKind::Linear { post, .. } = &mut linear.kind {
        post.ops.extend(new_ops);
        post.fused.extend(removed.iter().map(|n| n.name.clone()));
        post.sides.extend(new_sides.iter().cloned());
    }
    linear.inputs.extend(new_sides);
    g.tensors.remove(&old_out);
    for n in &removed[..removed.len() - 1] {
        g.tensors.remove(&n.output);
    }
    let mut idx = absorbed;
    idx.sort_unstable();
    for i in idx.into_iter().rev() {
        g.nodes.remove(i);
    }
    Ok(())
}

/// Replace every maximal `Dequantize(q_in), .., Quantize(q_out)` window of
/// unary ops in a Linear's chain with one table lookup.
pub fn compile_luts(g: &Graph) -> Result<Graph, GraphError> {
    let mut g = g.clone();
    for node in &mut g.nodes {
        let OpKind::Linear { post, .. } = &mut node.kind else { continue };
        post.ops = lut_windows(&post.ops)?;
    }
    g.validate()?;
    Ok(g)
}

fn unary(op: &PostOp) -> bool {
    matches!(op, PostOp::Gelu | PostOp::Quantize(_) | PostOp::Dequantize(_))
}

fn lut_windows(ops: &[PostOp]) -> Result<Vec<PostOp>, GraphError> {
    let mut out = Vec::with_capacity(ops.len());
    let mut i = 0;
    while i < ops.len() {
        if let PostOp::Dequantize(q_in) = &ops[i] {
            let run_end = (i..ops.len()).find(|&j| !unary(&ops[j])).unwrap_or(ops.len());
            let last_q = (i + 1..run_end).rev().find(|&j| matches!(ops[j], PostOp::Quantize(_)));
            if let Some(j) = last_q {
                let PostOp::Quantize(q_out) = &ops[j] else { unreachable!() };
                let table = build_lut(8, &ops[i + 1..j], q_in, q_out)?;
                out.push(PostOp::Lut(Arc::new(table)));
                i = j + 1;
                continue;
            }
        }
        out.push(ops[i].clone());
        i += 1;
    }
    Ok(out)
}
