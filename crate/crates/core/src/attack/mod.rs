//! Data-free perturbation crafting.
//!
//! δ starts from uniform noise in `[−ξ, ξ]` (or a warm-start perturbation)
//! and is driven by Adam to maximise the product of the mean activations of
//! the selected feature layers, in log form. After every step δ is clipped
//! to the ℓ∞ ball; every `rescale_every` steps it is multiplied by
//! `rescale_factor` so later updates are not swallowed by saturation.

mod loss;
mod selection;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::fooling_rate;
use crate::nn::Model;
use crate::numerics::{clip_inplace, rescale, uniform_init, AdamConfig, AdamState, Rng, Tensor};
use crate::perturbation::{digest_hex, Method, Perturbation, PerturbationMeta};

pub use loss::{fff_loss, FffLoss};
pub use selection::{select_layers, LayerSelection, SelectionPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Moving-average window W.
    pub window: usize,
    /// Stop once the W-average moved by less than this fraction over the
    /// last W iterations.
    pub rel_tol: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            window: 500,
            rel_tol: 1e-3,
        }
    }
}

/// Held-out images used to keep the best checkpoint.
#[derive(Debug, Clone)]
pub struct Validation {
    pub data: Dataset,
    /// Iterations between checkpoints. Checkpoints are taken before the
    /// rescale that falls on the same iteration.
    pub every: usize,
}

#[derive(Debug, Clone)]
pub enum Init {
    Random,
    WarmStart(Tensor),
}

#[derive(Debug, Clone)]
pub struct CraftConfig {
    pub xi: f64,
    pub lr: f64,
    pub rescale_every: usize,
    pub rescale_factor: f64,
    pub max_iters: usize,
    pub eps_floor: f64,
    pub seed: u64,
    pub init: Init,
    pub convergence: Convergence,
    pub selection: SelectionPolicy,
    pub validation: Option<Validation>,
}

impl Default for CraftConfig {
    fn default() -> Self {
        CraftConfig {
            xi: 10.0,
            lr: 0.1,
            rescale_every: 300,
            rescale_factor: 0.5,
            max_iters: 3000,
            eps_floor: 1e-12,
            seed: 0,
            init: Init::Random,
            convergence: Convergence::default(),
            selection: SelectionPolicy::Auto,
            validation: None,
        }
    }
}

impl CraftConfig {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.xi.is_finite() && self.xi > 0.0) {
            return bad("ξ must be positive");
        }
        if !(self.rescale_factor > 0.0 && self.rescale_factor < 1.0) {
            return bad("rescale factor must lie in (0, 1)");
        }
        if !(self.eps_floor > 0.0) {
            return bad("epsilon floor must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.max_iters == 0 || self.rescale_every == 0 || self.convergence.window == 0 {
            return bad("iteration counts must be positive");
        }
        if matches!(&self.validation, Some(v) if v.every == 0 || v.data.is_empty()) {
            return bad("validation needs images and a positive checkpoint period");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CraftTrace {
    /// Loss evaluated at the start of each iteration.
    pub losses: Vec<f64>,
    /// ‖δ‖∞ at the end of each iteration (after clipping and rescaling).
    pub linf: Vec<f64>,
    /// Iterations after which δ was rescaled.
    pub rescale_events: Vec<usize>,
    /// `(iteration, held-out fooling rate)` for each checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    /// Iteration of the returned checkpoint, when validation is on.
    pub best_checkpoint: Option<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
    pub layers: Vec<String>,
}

fn window_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Relative change of the trailing W-average against the one W iterations
/// earlier; `None` until 2W losses exist.
fn saturation(losses: &[f64], window: usize) -> Option<f64> {
    let n = losses.len();
    if n < 2 * window {
        return None;
    }
    let recent = window_mean(&losses[n - window..]);
    let before = window_mean(&losses[n - 2 * window..n - window]);
    Some((recent - before).abs() / before.abs().max(f64::MIN_POSITIVE))
}

/// Crafts a universal perturbation for `model` without touching any data
/// (unless `cfg.validation` is set).
pub fn craft(model: &Model, cfg: &CraftConfig) -> Result<(Perturbation, CraftTrace)> {
    cfg.check()?;
    let start = Instant::now();
    let shape = model.input_shape();
    let sel = select_layers(model.spec(), &cfg.selection)?;
    let mut delta = match &cfg.init {
        Init::Random => uniform_init(&shape, -cfg.xi, cfg.xi, &mut Rng::new(cfg.seed))?,
        Init::WarmStart(t) => {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "warm start {:?} does not match input {shape:?}",
                    t.shape()
                )));
            }
            let mut t = t.clone();
            clip_inplace(&mut t, -cfg.xi, cfg.xi);
            t
        }
    };
    let mut adam = AdamState::new(&shape, AdamConfig::with_lr(cfg.lr));
    let mut trace = CraftTrace {
        layers: sel.ids.clone(),
        ..CraftTrace::default()
    };
    let mut best: Option<(f64, usize, Tensor, f64)> = None;

    for it in 1..=cfg.max_iters {
        let step = fff_loss(model, &delta, &sel, cfg.eps_floor).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("iteration {it}: {m}")),
            other => other,
        })?;
        trace.losses.push(step.value);
        adam.update(&mut delta, &step.grad)?;
        clip_inplace(&mut delta, -cfg.xi, cfg.xi);
        trace.iterations = it;

        let converged = saturation(&trace.losses, cfg.convergence.window)
            .is_some_and(|r| r < cfg.convergence.rel_tol);
        let last = converged || it == cfg.max_iters;

        if let Some(v) = &cfg.validation {
            if it % v.every == 0 || last {
                let p = Perturbation::new(delta.clone(), meta(model, cfg, it, Some(step.value)))?;
                let rate = fooling_rate(model, &p, &v.data, false)?.fooling_rate;
                trace.checkpoints.push((it, rate));
                if best.as_ref().map_or(true, |b| rate > b.0) {
                    best = Some((rate, it, delta.clone(), step.value));
                }
            }
        }
        if last {
            trace.converged = converged;
            trace.linf.push(delta.linf_norm());
            break;
        }
        if it % cfg.rescale_every == 0 {
            rescale(&mut delta, cfg.rescale_factor)?;
            trace.rescale_events.push(it);
        }
        trace.linf.push(delta.linf_norm());
    }
    trace.seconds = start.elapsed().as_secs_f64();

    let final_loss = trace.losses.last().copied();
    let (delta, loss) = match best {
        Some((_, it, d, l)) => {
            trace.best_checkpoint = Some(it);
            (d, Some(l))
        }
        None => (delta, final_loss),
    };
    let p = Perturbation::new(delta, meta(model, cfg, trace.iterations, loss))?;
    Ok((p, trace))
}

fn meta(
    model: &Model,
    cfg: &CraftConfig,
    iterations: usize,
    loss: Option<f64>,
) -> PerturbationMeta {
    PerturbationMeta {
        method: Method::FeatureFool,
        xi: cfg.xi,
        seed: cfg.seed,
        iterations: iterations as u64,
        loss,
        model_digest: Some(digest_hex(model.digest())),
    }
}
