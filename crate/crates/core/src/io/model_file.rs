use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{open_frame, read_f32s, seal, write_header, MODEL_MAGIC};
use crate::error::{Error, FormatError, Result};
use crate::nn::{LayerParams, Model, NetworkSpec};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    layer: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Weight,
    Bias,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    network: NetworkSpec,
    manifest: Vec<ManifestEntry>,
}

fn manifest(model: &Model) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    for (layer, p) in model.spec().layers.iter().zip(model.params()) {
        if let Some(p) = p {
            for (role, t) in [(Role::Weight, &p.weight), (Role::Bias, &p.bias)] {
                out.push(ManifestEntry {
                    layer: layer.id.clone(),
                    role,
                    shape: t.shape().to_vec(),
                });
            }
        }
    }
    out
}

/// Serialized bytes without the trailing digest.
fn encode_unsealed(model: &Model) -> Vec<u8> {
    let descriptor = Descriptor {
        network: model.spec().clone(),
        manifest: manifest(model),
    };
    let header = serde_json::to_vec(&descriptor).expect("descriptor serializes");
    let mut out = Vec::new();
    write_header(&mut out, MODEL_MAGIC, &header);
    for p in model.params().iter().flatten() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    seal(encode_unsealed(model))
}

/// Digest of the model's `FFM1` encoding (the file trailer).
pub fn model_digest(model: &Model) -> u64 {
    super::fnv1a64(&encode_unsealed(model))
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, FormatError> {
    let (header, body) = open_frame(bytes, MODEL_MAGIC)?;
    let descriptor: Descriptor =
        serde_json::from_slice(header).map_err(|e| FormatError::Descriptor(e.to_string()))?;
    let spec = descriptor.network;
    let plan = spec
        .plan()
        .map_err(|e| FormatError::Descriptor(e.to_string()))?;

    let mut expected = Vec::new();
    for i in 0..spec.layers.len() {
        if let Some((ws, bs)) = crate::nn::param_shapes(&spec, &plan, i) {
            let id = &spec.layers[i].id;
            expected.push(ManifestEntry {
                layer: id.clone(),
                role: Role::Weight,
                shape: ws,
            });
            expected.push(ManifestEntry {
                layer: id.clone(),
                role: Role::Bias,
                shape: bs,
            });
        }
    }
    if expected != descriptor.manifest {
        return Err(FormatError::Inconsistent(
            "weight manifest disagrees with the network's inferred shapes".into(),
        ));
    }
    let total: usize = expected
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    let values = read_f32s(body, total)?;

    let mut at = 0;
    let mut take = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let t = Tensor::from_parts(shape.to_vec(), values[at..at + n].to_vec());
        at += n;
        t
    };
    let mut params = Vec::with_capacity(spec.layers.len());
    for i in 0..spec.layers.len() {
        params.push(
            crate::nn::param_shapes(&spec, &plan, i).map(|(ws, bs)| LayerParams {
                weight: take(&ws),
                bias: take(&bs),
            }),
        );
    }
    Model::new(spec, params).map_err(|e| FormatError::Inconsistent(e.to_string()))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| Error::format(path, e))
}
