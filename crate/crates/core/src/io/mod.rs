//! Binary model (`FFM1`) and perturbation (`FFP1`) files, plus PNG rendering.
//!
//! Both formats share one frame:
//!
//! ```text
//! magic[4] | version: u16 LE | header_len: u32 LE | header: UTF-8 JSON
//!          | body | digest: u64 LE
//! ```
//!
//! The trailing digest is 64-bit FNV-1a over every preceding byte. Reals
//! are stored as little-endian `f32`. The model body is the weight payload
//! in manifest order. The perturbation body is `C, H, W` as `u32 LE`
//! followed by the payload.

mod model_file;
mod perturbation_file;
mod render;

pub use model_file::{decode_model, encode_model, load_model, model_digest, save_model};
pub use perturbation_file::{
    decode_perturbation, encode_perturbation, load_perturbation, save_perturbation,
};
pub use render::{affine_pixel, render_perturbation};

use crate::error::FormatError;

pub const MODEL_MAGIC: &[u8; 4] = b"FFM1";
pub const PERTURBATION_MAGIC: &[u8; 4] = b"FFP1";
pub const FORMAT_VERSION: u16 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Writes the frame header (magic, version, JSON header).
fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], header: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let digest = fnv1a64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    out
}

/// Checks magic, version and digest; returns `(header, body)`.
fn open_frame<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], &'a [u8]), FormatError> {
    const FIXED: usize = 4 + 2 + 4;
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            needed: FIXED + 8,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < FIXED + 8 {
        return Err(FormatError::Truncated {
            needed: FIXED + 8,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (content, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let computed = fnv1a64(content);
    if stored != computed {
        return Err(FormatError::DigestMismatch { stored, computed });
    }
    let header_len = u32::from_le_bytes(content[6..10].try_into().expect("4 bytes")) as usize;
    let needed = FIXED.checked_add(header_len).unwrap_or(usize::MAX);
    if needed > content.len() {
        return Err(FormatError::Truncated {
            needed: needed.saturating_add(8),
            found: bytes.len(),
        });
    }
    Ok((&content[FIXED..needed], &content[needed..]))
}

fn read_f32s(body: &[u8], count: usize) -> Result<Vec<f64>, FormatError> {
    let needed = count.checked_mul(4).unwrap_or(usize::MAX);
    if body.len() != needed {
        return Err(FormatError::Inconsistent(format!(
            "payload holds {} bytes, manifest needs {needed}",
            body.len()
        )));
    }
    body.chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(FormatError::Inconsistent(format!(
                    "non-finite payload value {v}"
                )))
            }
        })
        .collect()
}
