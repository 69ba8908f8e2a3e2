//! Dense tensors, the reproducible generator, and the Adam update rule.

mod adam;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use rng::Rng;
pub use tensor::{clip_inplace, linf_norm, rescale, uniform_init, Tensor};
