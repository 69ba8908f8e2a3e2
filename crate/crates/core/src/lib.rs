//! Data-free universal adversarial perturbations for small convolutional
//! classifiers.
//!
//! A perturbation is crafted by driving the mean post-ReLU activation of the
//! network's feature-extraction layers as high as possible under an ℓ∞
//! budget, without looking at a single image. The crate also ships the
//! machinery to train desk-scale victim networks, a data-dependent universal
//! perturbation baseline, and the evaluation harness (fooling rates,
//! transfer matrices, timing).

pub mod attack;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod numerics;
pub mod perturbation;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use numerics::{Rng, Tensor};
pub use perturbation::{Method, Perturbation, PerturbationMeta};
