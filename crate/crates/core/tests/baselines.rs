mod common;

use common::*;
use featurefool::baselines::{minimal_flip, random_perturbation, uap_craft, UapConfig};
use featurefool::data::synth_dataset;
use featurefool::eval::predict;
use featurefool::nn::presets::{self, Normalization};
use featurefool::nn::{LayerKind, Model, NetworkSpec, INPUT};
use featurefool::train::{train, TrainConfig};
use featurefool::{Method, Rng, Tensor};

fn binary_linear(w: &[f64], b: f64) -> Model {
    // Logit 0 is held at zero; logit 1 is w·x + b.
    let n = w.len();
    let mut weight = vec![0.0; n];
    weight.extend_from_slice(w);
    model_with(
        NetworkSpec {
            input_shape: [1, 1, n],
            class_count: 2,
            layers: vec![
                layer("flat", LayerKind::Flatten, &[INPUT]),
                layer("fc", LayerKind::FullyConnected { out_dim: 2 }, &["flat"]),
                layer("prob", LayerKind::Softmax, &["fc"]),
            ],
        },
        vec![
            None,
            Some((
                Tensor::new(vec![2, n], weight).unwrap(),
                Tensor::new(vec![2], vec![0.0, b]).unwrap(),
            )),
            None,
        ],
    )
}

#[test]
fn random_noise_is_bounded_centred_and_seeded() {
    let p = random_perturbation([1, 100, 1000], 10.0, 3).unwrap();
    assert!(p.delta().linf_norm() <= 10.0);
    assert!(p.delta().mean().abs() <= 1.0);
    assert_eq!(p.meta().method, Method::Random);
    let q = random_perturbation([1, 100, 1000], 10.0, 3).unwrap();
    assert_eq!(p.delta().data(), q.delta().data());
    assert!(random_perturbation([1, 2, 2], 0.0, 3).is_err());
}

#[test]
fn linear_classifier_lands_on_the_boundary_in_one_step() {
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        let w: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let b = rng.uniform(-1.0, 1.0);
        let model = binary_linear(&w, b);
        let x = uniform(&[1, 1, 6], -3.0, 3.0, &mut rng);
        let f: f64 = w.iter().zip(x.data()).map(|(a, v)| a * v).sum::<f64>() + b;
        let flip = minimal_flip(&model, &x, 1, 0.0).unwrap();
        // The direction of the opposite class's margin flips sign with the label.
        let dir = if f > 0.0 { -1.0 } else { 1.0 };
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        for (r, wi) in flip.r.data().iter().zip(&w) {
            let expect = f.abs() / l1 * (dir * wi).signum();
            assert!((r - expect).abs() <= 1e-12);
        }
        let after: f64 = w
            .iter()
            .zip(x.data())
            .zip(flip.r.data())
            .map(|((a, v), r)| a * (v + r))
            .sum::<f64>()
            + b;
        assert!(after.abs() < 1e-9, "{after}");

        let flip = minimal_flip(&model, &x, 50, 0.02).unwrap();
        assert!(flip.flipped);
        assert_eq!(flip.iterations, 1);
    }
}

#[test]
fn zero_iterations_returns_zero_perturbation() {
    let model = binary_linear(&[1.0, -1.0], 0.5);
    let flip = minimal_flip(
        &model,
        &Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap(),
        0,
        0.02,
    )
    .unwrap();
    assert!(!flip.flipped);
    assert_eq!(flip.iterations, 0);
    assert!(flip.r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn minimal_flip_attacks_the_current_prediction() {
    // Every point is predicted as class 1 regardless of its ground truth;
    // the flip must still move it to class 0.
    let model = binary_linear(&[1.0, 1.0], 5.0);
    let x = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
    let flip = minimal_flip(&model, &x, 10, 0.02).unwrap();
    assert!(flip.flipped);
    let mut moved = x.clone();
    moved.add_assign(&flip.r).unwrap();
    let pred = predict(&model, &moved.reshape(&[1, 1, 1, 2]).unwrap()).unwrap();
    assert_eq!(pred, vec![0]);
}

fn trained_small_model() -> (Model, featurefool::data::Dataset) {
    let data = synth_dataset(&mut Rng::new(4), 4, 200, [1, 10, 10]).unwrap();
    let (mean, std) = data.channel_stats();
    let spec = presets::conv_b(
        [1, 10, 10],
        4,
        &Normalization {
            mean,
            scale: 1.0 / std,
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 1e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    (train(&spec, &data, &cfg).unwrap().model, data)
}

#[test]
fn uap_respects_budget_and_keeps_the_best_epoch() {
    let (model, data) = trained_small_model();
    let cfg = UapConfig {
        xi: 30.0,
        sample_count: 40,
        max_epochs: 4,
        seed: 2,
        ..UapConfig::default()
    };
    let (p, trace) = uap_craft(&model, &data, &cfg).unwrap();
    assert!(p.delta().linf_norm() <= 30.0);
    assert_eq!(p.meta().method, Method::UapDesk);
    assert_eq!(trace.sample_indices.len(), 40);
    let mut distinct = trace.sample_indices.clone();
    distinct.sort();
    distinct.dedup();
    assert_eq!(distinct.len(), 40);
    let best = trace.epoch_rates[trace.best_epoch - 1];
    assert!(best >= trace.epoch_rates[0]);
    assert!(trace.epoch_rates.iter().all(|&r| r <= best));
    let (q, again) = uap_craft(&model, &data, &cfg).unwrap();
    assert_eq!(again.sample_indices, trace.sample_indices);
    assert_eq!(q.delta().data(), p.delta().data());
}

#[test]
fn uap_rejects_bad_configs() {
    let (model, data) = trained_small_model();
    for cfg in [
        UapConfig {
            sample_count: 0,
            ..UapConfig::default()
        },
        UapConfig {
            sample_count: 201,
            ..UapConfig::default()
        },
        UapConfig {
            xi: -1.0,
            sample_count: 10,
            ..UapConfig::default()
        },
    ] {
        assert!(uap_craft(&model, &data, &cfg).is_err());
    }
}
