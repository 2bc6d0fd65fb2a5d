//! Static activation-memory plan: lifetimes of every intermediate value and
//! a greedy best-fit assignment of values to reusable slots.

use std::collections::BTreeMap;

use crate::graph::{is_metadata_transpose, Graph, GraphError, OpKind};

/// Where a tensor's bytes live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// Caller-provided graph input, by position.
    Input(usize),
    /// Intermediate value, by index into [`BufferPlan::intervals`].
    Value(usize),
}

/// Lifetime of one value in schedule positions: graph inputs exist at 0 and
/// node `i` runs at `i + 1`. `last` is the final position that reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub def: usize,
    pub last: usize,
    pub bytes: usize,
}

impl Interval {
    pub fn overlaps(&self, o: &Interval) -> bool {
        self.def <= o.last && o.def <= self.last
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferPlan {
    pub tensor_storage: BTreeMap<String, Storage>,
    pub intervals: Vec<Interval>,
    /// Slot of each value.
    pub slot_of: Vec<usize>,
    pub slot_bytes: Vec<usize>,
}

impl BufferPlan {
    pub fn planned_bytes(&self) -> usize {
        self.slot_bytes.iter().sum()
    }

    /// Footprint with one buffer per value.
    pub fn naive_bytes(&self) -> usize {
        self.intervals.iter().map(|i| i.bytes).sum()
    }
}

/// Reshapes and order-preserving transposes reuse their input's storage.
fn is_alias(kind: &OpKind, in_shape: &[usize]) -> bool {
    match kind {
        OpKind::Reshape { .. } => true,
        OpKind::Transpose { perm } => is_metadata_transpose(in_shape, perm),
        _ => false,
    }
}

pub fn plan_buffers(g: &Graph) -> Result<BufferPlan, GraphError> {
    let mut storage = BTreeMap::new();
    for (i, name) in g.inputs().iter().enumerate() {
        storage.insert(name.clone(), Storage::Input(i));
    }
    let mut intervals: Vec<Interval> = Vec::new();
    for (i, node) in g.nodes().iter().enumerate() {
        let pos = i + 1;
        let touch = |s: Storage, intervals: &mut Vec<Interval>| {
            if let Storage::Value(v) = s {
                intervals[v].last = intervals[v].last.max(pos);
            }
        };
        for input in &node.inputs {
            let s = *storage.get(input).ok_or_else(|| GraphError::UnknownTensor(input.clone()))?;
            touch(s, &mut intervals);
        }
        let src = g.tensor(&node.inputs[0])?;
        let s = if is_alias(&node.kind, &src.shape) {
            storage[&node.inputs[0]]
        } else {
            intervals.push(Interval { def: pos, last: pos, bytes: g.tensor(&node.output)?.bytes() });
            Storage::Value(intervals.len() - 1)
        };
        storage.insert(node.output.clone(), s);
    }
    let end = g.nodes().len() + 1;
    for out in g.outputs() {
        if let Some(Storage::Value(v)) = storage.get(out) {
            intervals[*v].last = end;
        }
    }

    // Greedy best fit in definition order; a slot is free once its current
    // value's last reader has run.
    let mut slot_bytes: Vec<usize> = Vec::new();
    let mut busy_until: Vec<usize> = Vec::new();
    let mut slot_of = Vec::with_capacity(intervals.len());
    for iv in &intervals {
        let free = (0..slot_bytes.len()).filter(|&s| busy_until[s] < iv.def);
        let fit = free.clone().filter(|&s| slot_bytes[s] >= iv.bytes).min_by_key(|&s| slot_bytes[s]);
        let slot = match fit.or_else(|| free.max_by_key(|&s| slot_bytes[s])) {
            Some(s) => {
                slot_bytes[s] = slot_bytes[s].max(iv.bytes);
                s
            }
            None => {
                slot_bytes.push(iv.bytes);
                busy_until.push(0);
                slot_bytes.len() - 1
            }
        };
        busy_until[slot] = iv.last;
        slot_of.push(slot);
    }
    Ok(BufferPlan { tensor_storage: storage, intervals, slot_of, slot_bytes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::tensor::DType;
    use proptest::prelude::*;

    fn check_plan(p: &BufferPlan) {
        for (a, ia) in p.intervals.iter().enumerate() {
            assert!(p.slot_bytes[p.slot_of[a]] >= ia.bytes);
            for (b, ib) in p.intervals.iter().enumerate().skip(a + 1) {
                if p.slot_of[a] == p.slot_of[b] {
                    assert!(!ia.overlaps(ib), "values {a} and {b} share a slot while both live");
                }
            }
        }
        assert!(p.planned_bytes() <= p.naive_bytes());
    }

    #[test]
    fn chain_reuses_two_slots_and_aliases_reshape() {
        let mut b = GraphBuilder::new();
        let mut t = b.input("x", &[4, 8], DType::F32, None).unwrap();
        for i in 0..5 {
            t = b.node(&format!("g{i}"), OpKind::Gelu, &[&t]).unwrap();
        }
        let r = b.node("r", OpKind::Reshape { shape: vec![32] }, &[&t]).unwrap();
        b.output(&r).unwrap();
        let p = plan_buffers(&b.finish().unwrap()).unwrap();
        assert_eq!(p.slot_bytes.len(), 2);
        assert_eq!(p.tensor_storage["r"], p.tensor_storage["g4"]);
        assert_eq!(p.intervals[4].last, 7);
        check_plan(&p);
    }

    proptest! {
        #[test]
        fn random_dags_never_share_live_slots(ops in proptest::collection::vec((0usize..3, 0usize..100), 1..30)) {
            let mut b = GraphBuilder::new();
            let mut names = vec![b.input("x", &[1, 4], DType::F32, None).unwrap()];
            for (i, &(kind, pick)) in ops.iter().enumerate() {
                let a = names[pick % names.len()].clone();
                let name = format!("n{i}");
                let shape = b_shape(&b, &a);
                let out = match kind {
                    0 => b.node(&name, OpKind::Gelu, &[&a]),
                    1 => b.node(&name, OpKind::Reshape { shape: vec![shape.iter().product::<usize>()] }, &[&a]),
                    _ => {
                        let other = names.iter().rev().find(|n| b_shape(&b, n) == shape).unwrap().clone();
                        b.node(&name, OpKind::Sum, &[&a, &other])
                    }
                }.unwrap();
                names.push(out);
            }
            b.output(names.last().unwrap()).unwrap();
            let p = plan_buffers(&b.finish().unwrap()).unwrap();
            check_plan(&p);
        }
    }

    fn b_shape(b: &GraphBuilder, name: &str) -> Vec<usize> {
        b.shape_of(name).unwrap()
    }
}
