//! The universal perturbation δ and the record of how it was made.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fff")]
    FeatureFool,
    #[serde(rename = "uap-desk")]
    UapDesk,
    #[serde(rename = "random")]
    Random,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::FeatureFool => "fff",
            Method::UapDesk => "uap-desk",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMeta {
    pub method: Method,
    /// ℓ∞ budget.
    pub xi: f64,
    pub seed: u64,
    /// Optimizer iterations (FFF) or epochs (uap-desk) actually run.
    pub iterations: u64,
    /// Objective value when the perturbation was saved, if any.
    pub loss: Option<f64>,
    /// Hex digest of the model the perturbation was crafted against.
    pub model_digest: Option<String>,
}

/// An image-shaped `[C, H, W]` perturbation with `‖δ‖∞ ≤ ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    delta: Tensor,
    meta: PerturbationMeta,
}

impl Perturbation {
    pub fn new(delta: Tensor, meta: PerturbationMeta) -> Result<Self> {
        if delta.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "perturbation must be [C, H, W], got {:?}",
                delta.shape()
            )));
        }
        if !(meta.xi.is_finite() && meta.xi > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ξ must be positive, got {}",
                meta.xi
            )));
        }
        let linf = delta.linf_norm();
        if linf > meta.xi {
            return Err(Error::InvalidArgument(format!(
                "‖δ‖∞ = {linf} exceeds ξ = {}",
                meta.xi
            )));
        }
        Ok(Perturbation { delta, meta })
    }

    /// The all-zero perturbation.
    pub fn zero(shape: [usize; 3], xi: f64) -> Result<Self> {
        Perturbation::new(
            Tensor::zeros(&shape),
            PerturbationMeta {
                method: Method::Random,
                xi,
                seed: 0,
                iterations: 0,
                loss: None,
                model_digest: None,
            },
        )
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn meta(&self) -> &PerturbationMeta {
        &self.meta
    }

    pub fn xi(&self) -> f64 {
        self.meta.xi
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.delta.shape();
        [s[0], s[1], s[2]]
    }

    pub fn into_delta(self) -> Tensor {
        self.delta
    }
}

pub(crate) fn digest_hex(digest: u64) -> String {
    format!("{digest:016x}")
}
