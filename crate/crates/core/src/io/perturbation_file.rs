use std::path::Path;

use super::{open_frame, read_f32s, seal, write_header, PERTURBATION_MAGIC};
use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;
use crate::perturbation::{Perturbation, PerturbationMeta};

/// Nearest `f32` whose magnitude does not exceed `bound`.
fn f32_within(v: f64, bound: f64) -> f32 {
    let f = v as f32;
    if (f as f64).abs() > bound && f != 0.0 {
        f32::from_bits(f.to_bits() - 1)
    } else {
        f
    }
}

pub fn encode_perturbation(p: &Perturbation) -> Vec<u8> {
    let header = serde_json::to_vec(p.meta()).expect("metadata serializes");
    let mut out = Vec::new();
    write_header(&mut out, PERTURBATION_MAGIC, &header);
    for e in p.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in p.delta().data() {
        out.extend_from_slice(&f32_within(v, p.xi()).to_le_bytes());
    }
    seal(out)
}

pub fn decode_perturbation(bytes: &[u8]) -> Result<Perturbation, FormatError> {
    let (header, body) = open_frame(bytes, PERTURBATION_MAGIC)?;
    let meta: PerturbationMeta =
        serde_json::from_slice(header).map_err(|e| FormatError::Descriptor(e.to_string()))?;
    if !(meta.xi.is_finite() && meta.xi > 0.0) {
        return Err(FormatError::Descriptor(format!(
            "ξ must be positive, got {}",
            meta.xi
        )));
    }
    if body.len() < 12 {
        return Err(FormatError::Truncated {
            needed: bytes.len() - body.len() + 12,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = body[..12]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(FormatError::Inconsistent(format!(
            "zero extent in {shape:?}"
        )));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| FormatError::Inconsistent(format!("shape {shape:?} overflows")))?;
    let values = read_f32s(&body[12..], count)?;
    let delta = Tensor::from_parts(shape, values);
    let linf = delta.linf_norm();
    if linf > meta.xi {
        return Err(FormatError::BoundViolation { linf, xi: meta.xi });
    }
    Perturbation::new(delta, meta).map_err(|e| FormatError::Inconsistent(e.to_string()))
}

pub fn save_perturbation(p: &Perturbation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_perturbation(p)).map_err(|e| Error::io(path, e))
}

pub fn load_perturbation(path: impl AsRef<Path>) -> Result<Perturbation> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_perturbation(&bytes).map_err(|e| Error::format(path, e))
}
