//! Fooling rates, transfer matrices, cross-dataset deltas and timing.
//!
//! JSON reports use the field names of [`FoolingReport`], [`TransferMatrix`]
//! and [`TimingReport`] verbatim.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::numerics::Tensor;
use crate::perturbation::{digest_hex, Perturbation, PerturbationMeta};

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoolingReport {
    pub n_images: usize,
    pub n_flipped: usize,
    pub fooling_rate: f64,
    pub clean_accuracy: f64,
    pub perturbed_accuracy: f64,
    /// Flips counted per ground-truth class.
    pub per_class_flips: Vec<usize>,
    pub elapsed_seconds: f64,
    pub model_digest: String,
    pub clamp_pixels: bool,
    pub perturbation: PerturbationMeta,
}

/// Predicted labels for an `[N, C, H, W]` batch, evaluated in chunks.
pub fn predict(model: &Model, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.batch();
    let per = images.item_len();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let chunks: Vec<Result<Vec<usize>>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + EVAL_CHUNK).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = e - s;
            let batch = Tensor::from_parts(shape, images.data()[s * per..e * per].to_vec());
            Ok(model.forward(&batch)?.predictions())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `images + δ` broadcast over the batch, optionally clamped to `[0, 255]`.
pub fn add_perturbation(images: &Tensor, delta: &Tensor, clamp_pixels: bool) -> Result<Tensor> {
    if images.shape().len() != 4 || images.shape()[1..] != *delta.shape() {
        return Err(Error::Shape(format!(
            "perturbation {:?} does not fit images {:?}",
            delta.shape(),
            images.shape()
        )));
    }
    let mut out = images.clone();
    let d = delta.data();
    for n in 0..out.batch() {
        for (v, &dv) in out.item_mut(n).iter_mut().zip(d) {
            *v += dv;
            if clamp_pixels {
                *v = v.clamp(0.0, 255.0);
            }
        }
    }
    Ok(out)
}

/// Counts samples whose prediction changes when δ is added.
pub fn fooling_rate(
    model: &Model,
    delta: &Perturbation,
    data: &Dataset,
    clamp_pixels: bool,
) -> Result<FoolingReport> {
    let start = Instant::now();
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "fooling rate over an empty dataset".into(),
        ));
    }
    if data.image_shape() != model.input_shape() || delta.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "model expects {:?}, data is {:?}, perturbation is {:?}",
            model.input_shape(),
            data.image_shape(),
            delta.shape()
        )));
    }
    let clean = predict(model, &data.images)?;
    let perturbed = predict(
        model,
        &add_perturbation(&data.images, delta.delta(), clamp_pixels)?,
    )?;
    Ok(summarize(
        model,
        delta,
        data,
        clamp_pixels,
        &clean,
        &perturbed,
        start.elapsed().as_secs_f64(),
    ))
}

/// Builds the report from precomputed predictions.
pub fn summarize(
    model: &Model,
    delta: &Perturbation,
    data: &Dataset,
    clamp_pixels: bool,
    clean: &[usize],
    perturbed: &[usize],
    elapsed_seconds: f64,
) -> FoolingReport {
    let n = data.len();
    let mut per_class_flips = vec![0; data.class_count];
    let (mut flipped, mut clean_ok, mut pert_ok) = (0, 0, 0);
    for i in 0..n {
        let truth = data.labels[i];
        if clean[i] != perturbed[i] {
            flipped += 1;
            per_class_flips[truth] += 1;
        }
        clean_ok += usize::from(clean[i] == truth);
        pert_ok += usize::from(perturbed[i] == truth);
    }
    FoolingReport {
        n_images: n,
        n_flipped: flipped,
        fooling_rate: flipped as f64 / n as f64,
        clean_accuracy: clean_ok as f64 / n as f64,
        perturbed_accuracy: pert_ok as f64 / n as f64,
        per_class_flips,
        elapsed_seconds,
        model_digest: digest_hex(model.digest()),
        clamp_pixels,
        perturbation: delta.meta().clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub models: Vec<String>,
    pub model_digests: Vec<String>,
    /// `rates[i][j]`: perturbation crafted on model `i`, evaluated on model `j`.
    pub rates: Vec<Vec<f64>>,
    pub perturbations: Vec<PerturbationMeta>,
    pub n_images: usize,
}

/// Evaluates every perturbation on every model.
pub fn transfer_matrix(
    models: &[(String, &Model)],
    deltas: &[Perturbation],
    data: &Dataset,
    clamp_pixels: bool,
) -> Result<TransferMatrix> {
    if models.len() != deltas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models but {} perturbations",
            models.len(),
            deltas.len()
        )));
    }
    if models.len() < 2 {
        return Err(Error::InvalidArgument(
            "a transfer matrix needs at least two models".into(),
        ));
    }
    let mut rates = vec![vec![0.0; models.len()]; models.len()];
    for (i, delta) in deltas.iter().enumerate() {
        for (j, (_, model)) in models.iter().enumerate() {
            rates[i][j] = fooling_rate(model, delta, data, clamp_pixels)?.fooling_rate;
        }
    }
    Ok(TransferMatrix {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        model_digests: models.iter().map(|(_, m)| digest_hex(m.digest())).collect(),
        rates,
        perturbations: deltas.iter().map(|d| d.meta().clone()).collect(),
        n_images: data.len(),
    })
}

/// `|rate_a − rate_b|` for one perturbation evaluated in two settings.
pub fn cross_data_delta(a: &FoolingReport, b: &FoolingReport) -> Result<f64> {
    if a.perturbation != b.perturbation {
        return Err(Error::InvalidArgument(
            "reports describe different perturbations".into(),
        ));
    }
    Ok((a.fooling_rate - b.fooling_rate).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub seconds: f64,
    pub iterations: usize,
    pub seconds_per_iteration: f64,
}

impl TimingReport {
    pub fn new(seconds: f64, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidArgument("timing of an empty run".into()));
        }
        Ok(TimingReport {
            seconds,
            iterations,
            seconds_per_iteration: seconds / iterations as f64,
        })
    }
}

/// Wall-clock summary of a crafting run.
pub fn timing_report(trace: &crate::attack::CraftTrace) -> Result<TimingReport> {
    TimingReport::new(trace.seconds, trace.iterations)
}
