mod common;

use common::*;
use featurefool::attack::{
    craft, fff_loss, select_layers, CraftConfig, Init, SelectionPolicy, Validation,
};
use featurefool::data::synth_dataset;
use featurefool::nn::presets::{self, Normalization};
use featurefool::nn::{input_gradient, LayerKind, LayerMeans, Model, NetworkSpec, INPUT};
use featurefool::{Rng, Tensor};
use proptest::prelude::*;

fn two_relu_spec() -> NetworkSpec {
    NetworkSpec {
        input_shape: [1, 3, 3],
        class_count: 2,
        layers: vec![
            layer("c1", conv_kind(2, 1, 1, 0), &[INPUT]),
            layer("r1", LayerKind::Relu, &["c1"]),
            layer("c2", conv_kind(1, 1, 1, 0), &["r1"]),
            layer("r2", LayerKind::Relu, &["c2"]),
            layer("flat", LayerKind::Flatten, &["r2"]),
            layer("fc", LayerKind::FullyConnected { out_dim: 2 }, &["flat"]),
            layer("prob", LayerKind::Softmax, &["fc"]),
        ],
    }
}

/// Both ReLU layers output a constant (their bias) whatever the input.
fn constant_model(b1: f64, b2: f64) -> Model {
    model_with(
        two_relu_spec(),
        vec![
            Some((Tensor::zeros(&[2, 1, 1, 1]), Tensor::full(&[2], b1))),
            None,
            Some((Tensor::zeros(&[1, 2, 1, 1]), Tensor::full(&[1], b2))),
            None,
            None,
            Some((Tensor::zeros(&[2, 9]), Tensor::zeros(&[2]))),
            None,
        ],
    )
}

fn small_conv_a(seed: u64) -> Model {
    let spec = presets::conv_a(
        [1, 12, 12],
        4,
        &Normalization {
            mean: vec![127.5],
            scale: 1.0 / 64.0,
        },
    )
    .unwrap();
    random_model(spec, &mut Rng::new(seed))
}

#[test]
fn plain_network_selects_both_relus() {
    let spec = presets::conv_a([1, 28, 28], 10, &Normalization::identity(1)).unwrap();
    let sel = select_layers(&spec, &SelectionPolicy::AllPostReluConvs).unwrap();
    assert_eq!(sel.ids, vec!["relu1", "relu2"]);
    assert_eq!(
        select_layers(&spec, &SelectionPolicy::Auto).unwrap().ids,
        sel.ids
    );
}

#[test]
fn branchy_network_selects_stem_and_concat() {
    let spec = presets::branchy([1, 28, 28], 10, &Normalization::identity(1)).unwrap();
    let sel = select_layers(&spec, &SelectionPolicy::ConcatPlusOuterConvs).unwrap();
    assert_eq!(sel.ids, vec!["stem_relu", "concat"]);
    assert_eq!(
        select_layers(&spec, &SelectionPolicy::Auto).unwrap().ids,
        sel.ids
    );
    let all = select_layers(&spec, &SelectionPolicy::AllPostReluConvs).unwrap();
    assert_eq!(all.ids, vec!["stem_relu", "b1_relu", "b2_relu"]);
}

#[test]
fn fully_connected_network_has_nothing_to_select() {
    let spec = NetworkSpec {
        input_shape: [1, 2, 2],
        class_count: 2,
        layers: vec![
            layer("flat", LayerKind::Flatten, &[INPUT]),
            layer("fc", LayerKind::FullyConnected { out_dim: 2 }, &["flat"]),
            layer("prob", LayerKind::Softmax, &["fc"]),
        ],
    };
    for p in [
        SelectionPolicy::AllPostReluConvs,
        SelectionPolicy::ConcatPlusOuterConvs,
        SelectionPolicy::Auto,
    ] {
        assert!(select_layers(&spec, &p).is_err());
    }
}

#[test]
fn explicit_selection_is_validated() {
    let spec = two_relu_spec();
    let sel = select_layers(
        &spec,
        &SelectionPolicy::Explicit(vec!["r2".into(), "c1".into()]),
    )
    .unwrap();
    assert_eq!(sel.ids, vec!["r2", "c1"]);
    assert!(select_layers(&spec, &SelectionPolicy::Explicit(vec!["nope".into()])).is_err());
    assert!(select_layers(&spec, &SelectionPolicy::Explicit(vec!["fc".into()])).is_err());
    assert!(select_layers(&spec, &SelectionPolicy::Explicit(vec![])).is_err());
}

fn both() -> featurefool::attack::LayerSelection {
    select_layers(&two_relu_spec(), &SelectionPolicy::AllPostReluConvs).unwrap()
}

#[test]
fn unit_means_give_zero_loss() {
    let l = fff_loss(
        &constant_model(1.0, 1.0),
        &Tensor::zeros(&[1, 3, 3]),
        &both(),
        1e-12,
    )
    .unwrap();
    assert_eq!(l.means, vec![1.0, 1.0]);
    assert!(l.value.abs() < 1e-11);
}

#[test]
fn half_means_give_ln_four() {
    let l = fff_loss(
        &constant_model(0.5, 0.5),
        &Tensor::zeros(&[1, 3, 3]),
        &both(),
        1e-12,
    )
    .unwrap();
    assert!((l.value - 4f64.ln()).abs() < 1e-10, "{}", l.value);
}

#[test]
fn dead_layer_contributes_the_floor() {
    let l = fff_loss(
        &constant_model(1.0, -1.0),
        &Tensor::zeros(&[1, 3, 3]),
        &both(),
        1e-12,
    )
    .unwrap();
    assert_eq!(l.means[1], 0.0);
    let floor = -(1e-12f64).ln();
    assert!((floor - 27.631021115928547).abs() < 1e-12);
    assert!((l.value - floor).abs() < 1e-9);
    assert!(l.grad.all_finite());
}

#[test]
fn loss_does_not_depend_on_layer_order() {
    let model = small_conv_a(1);
    let delta = uniform(&[1, 12, 12], -10.0, 10.0, &mut Rng::new(2));
    let fwd = select_layers(
        model.spec(),
        &SelectionPolicy::Explicit(vec!["relu1".into(), "relu2".into()]),
    )
    .unwrap();
    let rev = select_layers(
        model.spec(),
        &SelectionPolicy::Explicit(vec!["relu2".into(), "relu1".into()]),
    )
    .unwrap();
    let a = fff_loss(&model, &delta, &fwd, 1e-12).unwrap();
    let b = fff_loss(&model, &delta, &rev, 1e-12).unwrap();
    assert!((a.value - b.value).abs() <= 1e-12);
    for (x, y) in a.grad.data().iter().zip(b.grad.data()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn sum_of_logs_gradient_equals_log_product_gradient() {
    for seed in 0..5 {
        let model = small_conv_a(seed);
        let delta = uniform(&[1, 12, 12], -10.0, 10.0, &mut Rng::new(100 + seed));
        let sel = both_of(&model);
        let l = fff_loss(&model, &delta, &sel, 1e-300).unwrap();
        // −∇ln Πᵢ mᵢ = −Σᵢ ∇mᵢ / mᵢ.
        let x = delta.clone().reshape(&[1, 1, 12, 12]).unwrap();
        let mut expect = vec![0.0; delta.len()];
        for &i in sel.indices() {
            let (m, g) = input_gradient(&model, &x, &LayerMeans(vec![i])).unwrap();
            assert!(m > 0.0);
            for (e, v) in expect.iter_mut().zip(g.data()) {
                *e -= v / m;
            }
        }
        let scale = expect.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in l.grad.data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10 * scale);
        }
    }
}

fn both_of(model: &Model) -> featurefool::attack::LayerSelection {
    select_layers(model.spec(), &SelectionPolicy::AllPostReluConvs).unwrap()
}

#[test]
fn loss_rejects_misshapen_delta() {
    let model = small_conv_a(1);
    assert!(fff_loss(
        &model,
        &Tensor::zeros(&[1, 12, 11]),
        &both_of(&model),
        1e-12
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_finite_in_the_budget_ball(seed in any::<u64>(), xi in 0.01f64..50.0) {
        let model = small_conv_a(seed % 4);
        let delta = uniform(&[1, 12, 12], -xi, xi, &mut Rng::new(seed));
        let l = fff_loss(&model, &delta, &both_of(&model), 1e-12).unwrap();
        prop_assert!(l.value.is_finite());
        prop_assert!(l.grad.all_finite());
    }

    #[test]
    fn every_iterate_respects_the_budget(seed in any::<u64>(), xi in 0.5f64..30.0, every in 1usize..20) {
        let model = small_conv_a(seed % 3);
        let cfg = CraftConfig { xi, max_iters: 25, rescale_every: every, seed, ..CraftConfig::default() };
        let (p, trace) = craft(&model, &cfg).unwrap();
        prop_assert!(trace.linf.iter().all(|&v| v <= xi));
        prop_assert!(p.delta().linf_norm() <= xi);
        prop_assert_eq!(trace.linf.len(), trace.iterations);
        prop_assert!(trace.losses.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn crafting_is_deterministic() {
    let model = small_conv_a(3);
    let cfg = CraftConfig {
        max_iters: 40,
        rescale_every: 15,
        seed: 9,
        ..CraftConfig::default()
    };
    let (a, ta) = craft(&model, &cfg).unwrap();
    let (b, tb) = craft(&model, &cfg).unwrap();
    assert_eq!(
        featurefool::io::encode_perturbation(&a),
        featurefool::io::encode_perturbation(&b)
    );
    assert_eq!(ta.losses, tb.losses);
    let (c, _) = craft(&model, &CraftConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.delta().data(), c.delta().data());
}

#[test]
fn rescale_schedule_skips_the_final_iteration() {
    let model = small_conv_a(4);
    let cfg = CraftConfig {
        max_iters: 30,
        rescale_every: 10,
        ..CraftConfig::default()
    };
    let (p, trace) = craft(&model, &cfg).unwrap();
    assert_eq!(trace.rescale_events, vec![10, 20]);
    assert_eq!(trace.iterations, 30);
    assert_eq!(trace.losses.len(), 30);
    assert!(trace.linf[9] <= cfg.xi * cfg.rescale_factor);
    assert_eq!(p.meta().iterations, 30);
    assert_eq!(
        p.meta().model_digest.as_deref(),
        Some(format!("{:016x}", model.digest()).as_str())
    );
    assert_eq!(trace.layers, vec!["relu1", "relu2"]);
}

#[test]
fn saturated_loss_stops_the_run() {
    // Constant activations: the loss never moves, so the run converges as
    // soon as two windows are available.
    let model = constant_model(0.5, 0.5);
    let mut cfg = CraftConfig {
        max_iters: 1000,
        ..CraftConfig::default()
    };
    cfg.convergence.window = 20;
    let (_, trace) = craft(&model, &cfg).unwrap();
    assert!(trace.converged);
    assert_eq!(trace.iterations, 40);
}

#[test]
fn warm_start_is_shape_checked_and_clipped() {
    let model = small_conv_a(5);
    let bad = CraftConfig {
        init: Init::WarmStart(Tensor::zeros(&[1, 10, 10])),
        max_iters: 2,
        ..CraftConfig::default()
    };
    assert!(craft(&model, &bad).is_err());
    let loud = Tensor::full(&[1, 12, 12], 40.0);
    let cfg = CraftConfig {
        init: Init::WarmStart(loud),
        max_iters: 1,
        lr: 0.0,
        ..CraftConfig::default()
    };
    let (p, _) = craft(&model, &cfg).unwrap();
    assert!(p.delta().data().iter().all(|&v| v == 10.0));
}

#[test]
fn invalid_configs_are_rejected() {
    let model = small_conv_a(6);
    for cfg in [
        CraftConfig {
            xi: 0.0,
            ..CraftConfig::default()
        },
        CraftConfig {
            rescale_factor: 1.0,
            ..CraftConfig::default()
        },
        CraftConfig {
            eps_floor: 0.0,
            ..CraftConfig::default()
        },
        CraftConfig {
            max_iters: 0,
            ..CraftConfig::default()
        },
    ] {
        assert!(craft(&model, &cfg).is_err());
    }
}

#[test]
fn validation_only_picks_the_checkpoint() {
    let model = small_conv_a(7);
    let data = synth_dataset(&mut Rng::new(1), 4, 40, [1, 12, 12]).unwrap();
    let base = CraftConfig {
        max_iters: 30,
        rescale_every: 10,
        seed: 3,
        ..CraftConfig::default()
    };
    let (_, plain) = craft(&model, &base).unwrap();
    let cfg = CraftConfig {
        validation: Some(Validation { data, every: 10 }),
        ..base
    };
    let (p, checked) = craft(&model, &cfg).unwrap();
    assert_eq!(plain.losses, checked.losses);
    assert_eq!(
        checked.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(),
        vec![10, 20, 30]
    );
    let best = checked
        .checkpoints
        .iter()
        .map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen = checked.best_checkpoint.unwrap();
    assert_eq!(
        checked
            .checkpoints
            .iter()
            .find(|c| c.0 == chosen)
            .unwrap()
            .1,
        best
    );
    assert!(p.delta().linf_norm() <= cfg.xi);
    assert!(plain.checkpoints.is_empty() && plain.best_checkpoint.is_none());
}
