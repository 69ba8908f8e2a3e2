//! Mini-batch Adam training of victim networks.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::predict;
use crate::nn::{param_gradient, Model, NetworkSpec};
use crate::numerics::{AdamConfig, AdamState, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Fraction of the data held out for per-epoch accuracy.
    pub eval_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            shuffle: true,
            eval_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's mini-batches.
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Trains a freshly initialised network. The returned weights are rounded
/// to `f32`, so a saved and reloaded model behaves identically.
pub fn train(spec: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.eval_fraction) {
        return Err(Error::InvalidArgument(
            "eval fraction must lie in [0, 1)".into(),
        ));
    }
    if data.image_shape() != spec.input_shape {
        return Err(Error::Shape(format!(
            "data {:?} vs network input {:?}",
            data.image_shape(),
            spec.input_shape
        )));
    }
    if data.class_count > spec.class_count {
        return Err(Error::Shape(format!(
            "data has {} classes, network {}",
            data.class_count, spec.class_count
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut model = Model::init(spec.clone(), &mut rng.split())?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let n_eval = (data.len() as f64 * cfg.eval_fraction).floor() as usize;
    let (eval_idx, train_idx) = order.split_at(n_eval);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument(
            "no training samples left after the split".into(),
        ));
    }
    let eval_set = if eval_idx.is_empty() {
        None
    } else {
        Some(data.subset(eval_idx)?)
    };
    let mut train_idx = train_idx.to_vec();

    let mut states: Vec<Option<(AdamState, AdamState)>> = model
        .params()
        .iter()
        .map(|p| {
            p.as_ref().map(|p| {
                (
                    AdamState::new(p.weight.shape(), AdamConfig::with_lr(cfg.lr)),
                    AdamState::new(p.bias.shape(), AdamConfig::with_lr(cfg.lr)),
                )
            })
        })
        .collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut train_idx);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = data.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads) = match param_gradient(&model, &batch, &labels) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss;
            batches += 1;
            for ((p, g), s) in model
                .params_mut()
                .iter_mut()
                .zip(&grads.params)
                .zip(&mut states)
            {
                if let (Some(p), Some(g), Some((sw, sb))) = (p, g, s) {
                    sw.update(&mut p.weight, &g.weight)?;
                    sb.update(&mut p.bias, &g.bias)?;
                }
            }
        }
        let train_loss = loss_sum / batches as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
            });
        }
        let eval_accuracy = eval_set.as_ref().map(|e| accuracy(&model, e)).transpose()?;
        history.push(EpochStats {
            epoch,
            train_loss,
            eval_accuracy,
        });
    }
    model.round_to_f32();
    Ok(Trained { model, history })
}

/// Fraction of samples whose prediction equals the label.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    accuracy_of(&predict(model, &data.images)?, &data.labels)
}

/// Fraction of positions where `predicted` equals `labels`.
pub fn accuracy_of(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy over {} predictions and {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
