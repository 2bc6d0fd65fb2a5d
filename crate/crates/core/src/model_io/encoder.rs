//! Encoder models in the container format.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::graph::{EncoderModel, LayerWeights, LinearWeights};
use crate::tensor::{DType, Tensor};

use super::{read_container, write_container, ActivationQuant, ContainerTensor, ModelContainer, ModelError, Payload};

const LINEARS: [&str; 6] = ["q", "k", "v", "o", "ffn1", "ffn2"];
const NORMS: [&str; 4] = ["ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"];

fn vector(name: String, role: &str, v: &Arc<[f32]>) -> ContainerTensor {
    let tensor = Tensor::from_f32([v.len()], v.to_vec()).expect("1-D shape matches");
    ContainerTensor { name, role: role.into(), payload: Payload::Dense { tensor, quant: None } }
}

pub fn to_container(model: &EncoderModel) -> Result<ModelContainer, ModelError> {
    model.validate()?;
    let mut tensors = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        for (tag, lw) in LINEARS.into_iter().zip(l.linears()) {
            tensors.push(ContainerTensor {
                name: format!("l{i}.{tag}.weight"),
                role: "weight".into(),
                payload: Payload::Sparse(lw.weight.clone()),
            });
            tensors.push(vector(format!("l{i}.{tag}.bias"), "bias", &lw.bias));
        }
        let norms = [&l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta];
        for (tag, v) in NORMS.into_iter().zip(norms) {
            let role = if tag.ends_with("gamma") { "ln_gamma" } else { "ln_beta" };
            tensors.push(vector(format!("l{i}.{tag}"), role, v));
        }
    }
    Ok(ModelContainer {
        topology: Some(model.config),
        activations: Some(ActivationQuant { layers: model.quant.clone(), output: model.output.clone() }),
        tensors,
    })
}

pub fn from_container(c: ModelContainer) -> Result<EncoderModel, ModelError> {
    let meta = |m: &str| ModelError::Metadata(m.into());
    let config = c.topology.ok_or_else(|| meta("no encoder topology"))?;
    config.validate().map_err(|e| ModelError::Metadata(e.to_string()))?;
    let acts = c.activations.ok_or_else(|| meta("no activation quantization"))?;
    let expected = config.layers * (2 * LINEARS.len() + NORMS.len());
    if c.tensors.len() != expected {
        return Err(ModelError::Metadata(format!("{} tensors for {} layers", c.tensors.len(), config.layers)));
    }
    let mut table: BTreeMap<String, Payload> = BTreeMap::new();
    for t in c.tensors {
        if table.insert(t.name.clone(), t.payload).is_some() {
            return Err(ModelError::Metadata(format!("duplicate tensor `{}`", t.name)));
        }
    }
    let invalid = |name: &str, reason: &str| ModelError::InvalidTensor { name: name.into(), reason: reason.into() };
    let mut take = |name: String| table.remove(&name).ok_or(ModelError::Metadata(format!("missing tensor `{name}`")));
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let mut lin = Vec::with_capacity(LINEARS.len());
        for tag in LINEARS {
            let wn = format!("l{i}.{tag}.weight");
            let Payload::Sparse(weight) = take(wn.clone())? else {
                return Err(invalid(&wn, "expected a sparse weight"));
            };
            let bn = format!("l{i}.{tag}.bias");
            let bias = f32_vector(take(bn.clone())?).ok_or_else(|| invalid(&bn, "expected a 1-D f32 vector"))?;
            lin.push(LinearWeights { weight, bias });
        }
        let mut norms = Vec::with_capacity(NORMS.len());
        for tag in NORMS {
            let n = format!("l{i}.{tag}");
            norms.push(f32_vector(take(n.clone())?).ok_or_else(|| invalid(&n, "expected a 1-D f32 vector"))?);
        }
        let mut lin = lin.into_iter();
        let mut next = || lin.next().expect("six linears");
        layers.push(LayerWeights {
            q: next(),
            k: next(),
            v: next(),
            o: next(),
            ffn1: next(),
            ffn2: next(),
            ln1_gamma: norms[0].clone(),
            ln1_beta: norms[1].clone(),
            ln2_gamma: norms[2].clone(),
            ln2_beta: norms[3].clone(),
        });
    }
    let model = EncoderModel { config, layers, quant: acts.layers, output: acts.output };
    model.validate().map_err(|e| ModelError::Metadata(e.to_string()))?;
    Ok(model)
}

fn f32_vector(p: Payload) -> Option<Arc<[f32]>> {
    match p {
        Payload::Dense { tensor, quant: None } if tensor.dtype() == DType::F32 && tensor.shape().len() == 1 => {
            Some(tensor.as_f32().ok()?.into())
        }
        _ => None,
    }
}

pub fn to_bytes(model: &EncoderModel) -> Result<Vec<u8>, ModelError> {
    write_container(&to_container(model)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderModel, ModelError> {
    from_container(read_container(bytes)?)
}

pub fn save_model(model: &EncoderModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EncoderModel, ModelError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::{generate_synthetic_model, reseal};

    fn tiny() -> EncoderModel {
        generate_synthetic_model(1, 16, 2, 32, 0.8, 7).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    /// Replace `from` by `to` (same length) in the metadata and reseal.
    fn edit(good: &[u8], from: &str, to: &str) -> Result<EncoderModel, ModelError> {
        assert_eq!(from.len(), to.len());
        let len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
        let meta = std::str::from_utf8(&good[16..16 + len]).unwrap();
        assert!(meta.contains(from), "{from} not in metadata");
        let mut b = good.to_vec();
        b[16..16 + len].copy_from_slice(meta.replacen(from, to, 1).as_bytes());
        reseal(&mut b);
        from_bytes(&b)
    }

    fn field(good: &[u8], tensor: usize, key: &str) -> u64 {
        let len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&good[16..16 + len]).unwrap();
        v["tensors"][tensor][key].as_u64().unwrap()
    }

    /// `"key":old` rewritten to `"key":new`, right-aligned in the same width.
    fn replace(good: &[u8], key: &str, old: u64, new: u64) -> Result<EncoderModel, ModelError> {
        let from = format!("\"{key}\":{old}");
        let w = from.len() - key.len() - 3;
        edit(good, &from, &format!("\"{key}\":{new:>w$}"))
    }

    #[test]
    fn table_damage_maps_to_distinct_errors() {
        let good = to_bytes(&tiny()).unwrap();
        let (off0, off1, len0) = (field(&good, 0, "offset"), field(&good, 1, "offset"), field(&good, 0, "length"));
        assert!(matches!(replace(&good, "offset", off0, 0), Err(ModelError::OutOfBounds(_))));
        assert!(matches!(replace(&good, "offset", off0, off0 + 1), Err(ModelError::OutOfBounds(_))));
        assert!(matches!(replace(&good, "offset", off1, off0), Err(ModelError::Overlap(..))));
        assert!(matches!(replace(&good, "length", len0, len0 - 8), Err(ModelError::LengthMismatch { .. })));
        assert!(matches!(edit(&good, "\"topology\"", "\"topologY\""), Err(ModelError::Metadata(_))));
        assert!(matches!(edit(&good, "\"l0.q.bias\"", "\"l0.q.biaz\""), Err(ModelError::Metadata(_))));
    }

    #[test]
    fn corrupt_index_is_an_invalid_tensor() {
        let good = to_bytes(&tiny()).unwrap();
        let at = field(&good, 0, "offset") as usize + 16usize.div_ceil(4) * 4;
        let mut b = good.clone();
        b[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        reseal(&mut b);
        assert!(matches!(from_bytes(&b), Err(ModelError::InvalidTensor { .. })));
    }
}
