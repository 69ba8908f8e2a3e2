//! Comparison attacks: uniform ℓ∞ noise, and the data-dependent universal
//! perturbation ("uap-desk") built from per-image minimal flips.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{add_perturbation, predict};
use crate::nn::{Model, Seed};
use crate::numerics::{clip_inplace, uniform_init, Rng, Tensor};
use crate::perturbation::{digest_hex, Method, Perturbation, PerturbationMeta};

/// Elementwise uniform noise in `[−ξ, ξ]`.
pub fn random_perturbation(shape: [usize; 3], xi: f64, seed: u64) -> Result<Perturbation> {
    if !(xi.is_finite() && xi > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ξ must be positive, got {xi}"
        )));
    }
    let delta = uniform_init(&shape, -xi, xi, &mut Rng::new(seed))?;
    Perturbation::new(
        delta,
        PerturbationMeta {
            method: Method::Random,
            xi,
            seed,
            iterations: 0,
            loss: None,
            model_digest: None,
        },
    )
}

#[derive(Debug, Clone)]
pub struct Flip {
    /// Perturbation including the overshoot factor.
    pub r: Tensor,
    pub iterations: usize,
    /// Whether `x + r` is classified differently from `x`.
    pub flipped: bool,
}

/// Iterative linearisation toward the nearest decision boundary in ℓ∞
/// geometry. For the current label `c` and each other class `k`, with
/// `w_k = ∇(logit_k − logit_c)` and `f_k = logit_k − logit_c`, the class
/// minimising `|f_k| / ‖w_k‖₁` is chosen and `r` grows by
/// `(|f_k| / ‖w_k‖₁)·sign(w_k)`. Flips are tested on `x + (1 + overshoot)·r`,
/// which is also what is returned.
pub fn minimal_flip(model: &Model, x: &Tensor, max_iter: usize, overshoot: f64) -> Result<Flip> {
    let [c, h, w] = model.input_shape();
    if x.shape() != [c, h, w] {
        return Err(Error::Shape(format!(
            "image {:?} does not match [{c}, {h}, {w}]",
            x.shape()
        )));
    }
    let classes = model.class_count();
    let scale = 1.0 + overshoot;
    let mut r = Tensor::zeros(&[c, h, w]);
    let mut label = None;
    let mut iterations = 0;
    for it in 0..max_iter {
        let mut probe = x.clone();
        for (p, rv) in probe.data_mut().iter_mut().zip(r.data()) {
            *p += scale * rv;
        }
        let trace = model.forward(&probe.reshape(&[1, c, h, w])?)?;
        let current = trace.predicted_label(0);
        let orig = *label.get_or_insert(current);
        if current != orig {
            r.scale(scale);
            return Ok(Flip {
                r,
                iterations: it,
                flipped: true,
            });
        }
        let logits = trace.logits().item(0).to_vec();
        let mut best: Option<(f64, Tensor)> = None;
        for k in (0..classes).filter(|&k| k != orig) {
            let mut seed = Tensor::zeros(trace.logits().shape());
            seed.data_mut()[k] = 1.0;
            seed.data_mut()[orig] = -1.0;
            let g = model
                .backward(
                    &trace,
                    vec![Seed {
                        layer: trace.logits_layer(),
                        grad: seed,
                    }],
                    true,
                    false,
                )?
                .input;
            if !g.all_finite() {
                return Err(Error::NonFinite("minimal-flip gradient".into()));
            }
            let l1: f64 = g.data().iter().map(|v| v.abs()).sum();
            if l1 == 0.0 {
                continue;
            }
            let dist = (logits[k] - logits[orig]).abs() / l1;
            if best.as_ref().map_or(true, |b| dist < b.0) {
                best = Some((dist, g));
            }
        }
        let Some((dist, g)) = best else { break };
        for (rv, gv) in r.data_mut().iter_mut().zip(g.data()) {
            if *gv != 0.0 {
                *rv += dist * gv.signum();
            }
        }
        iterations = it + 1;
    }
    r.scale(scale);
    let mut probe = x.clone();
    probe.add_assign(&r)?;
    let after = model
        .forward(&probe.reshape(&[1, c, h, w])?)?
        .predicted_label(0);
    let before = model
        .forward(&x.clone().reshape(&[1, c, h, w])?)?
        .predicted_label(0);
    Ok(Flip {
        r,
        iterations,
        flipped: after != before,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UapConfig {
    pub xi: f64,
    /// Training images drawn for crafting.
    pub sample_count: usize,
    pub max_epochs: usize,
    /// Inner minimal-flip iteration budget per image.
    pub max_inner_iters: usize,
    pub overshoot: f64,
    pub seed: u64,
}

impl Default for UapConfig {
    fn default() -> Self {
        UapConfig {
            xi: 10.0,
            sample_count: 1000,
            max_epochs: 10,
            max_inner_iters: 50,
            overshoot: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UapTrace {
    /// Sample-set fooling rate after each epoch.
    pub epoch_rates: Vec<f64>,
    pub best_epoch: usize,
    /// Indices of the images drawn from the dataset.
    pub sample_indices: Vec<usize>,
    /// Per-image minimal-flip calls made.
    pub inner_attacks: usize,
    pub seconds: f64,
}

/// Sample-set fooling rate of `v`.
fn sample_rate(model: &Model, samples: &Tensor, clean: &[usize], v: &Tensor) -> Result<f64> {
    let pred = predict(model, &add_perturbation(samples, v, false)?)?;
    let flipped = pred.iter().zip(clean).filter(|(a, b)| a != b).count();
    Ok(flipped as f64 / clean.len() as f64)
}

/// Data-dependent universal perturbation: sweeps the drawn samples, adding
/// a minimal flip for each one the current `v` fails to fool and projecting
/// back into the ℓ∞ ball. Returns the epoch with the best sample-set
/// fooling rate; stops after two epochs without improvement.
pub fn uap_craft(
    model: &Model,
    data: &Dataset,
    cfg: &UapConfig,
) -> Result<(Perturbation, UapTrace)> {
    let start = Instant::now();
    if cfg.sample_count == 0 {
        return Err(Error::InvalidArgument(
            "uap needs at least one sample".into(),
        ));
    }
    if !(cfg.xi.is_finite() && cfg.xi > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ξ must be positive, got {}",
            cfg.xi
        )));
    }
    if cfg.sample_count > data.len() {
        return Err(Error::InvalidArgument(format!(
            "{} samples requested from {} images",
            cfg.sample_count,
            data.len()
        )));
    }
    if data.image_shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "data {:?} vs model {:?}",
            data.image_shape(),
            model.input_shape()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(cfg.seed).shuffle(&mut order);
    order.truncate(cfg.sample_count);
    let samples = data.batch(&order);
    let clean = predict(model, &samples)?;

    let shape = model.input_shape();
    let mut v = Tensor::zeros(&shape);
    let mut best: Option<(f64, usize, Tensor)> = None;
    let mut epoch_rates = Vec::new();
    let mut inner_attacks = 0;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs.max(1) {
        for (s, &label) in clean.iter().enumerate() {
            let mut x = Tensor::from_parts(shape.to_vec(), samples.item(s).to_vec());
            x.add_assign(&v)?;
            let pred = model
                .forward(&x.clone().reshape(&[1, shape[0], shape[1], shape[2]])?)?
                .predicted_label(0);
            if pred != label {
                continue;
            }
            let flip = minimal_flip(model, &x, cfg.max_inner_iters, cfg.overshoot)?;
            inner_attacks += 1;
            v.add_assign(&flip.r)?;
            clip_inplace(&mut v, -cfg.xi, cfg.xi);
        }
        let rate = sample_rate(model, &samples, &clean, &v)?;
        epoch_rates.push(rate);
        if best.as_ref().map_or(true, |b| rate > b.0) {
            best = Some((rate, epoch, v.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= 2 {
                break;
            }
        }
    }
    let (_, best_epoch, v) = best.expect("at least one epoch");
    let p = Perturbation::new(
        v,
        PerturbationMeta {
            method: Method::UapDesk,
            xi: cfg.xi,
            seed: cfg.seed,
            iterations: epoch_rates.len() as u64,
            loss: None,
            model_digest: Some(digest_hex(model.digest())),
        },
    )?;
    Ok((
        p,
        UapTrace {
            epoch_rates,
            best_epoch,
            sample_indices: order,
            inner_attacks,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}
