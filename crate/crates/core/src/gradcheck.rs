//! Finite-difference verification of the activation-loss gradient on
//! randomly generated small networks.

use serde::{Deserialize, Serialize};

use crate::attack::{fff_loss, select_layers, SelectionPolicy};
use crate::error::Result;
use crate::nn::{pool_out_extent, LayerKind, LayerSpec, Model, NetworkSpec, INPUT};
use crate::numerics::{Rng, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Minimum distance of every ReLU preactivation from its kink, and of every
/// max-pool winner from the runner-up, at an accepted probe point.
pub const KINK_MARGIN: f64 = 1e-3;
const EPS_FLOOR: f64 = 1e-12;
const MAX_PROBES: usize = 200;

/// Outcome of one randomly generated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub input_shape: [usize; 3],
    /// Layer kinds in network order, e.g. `conv2d`, `relu`, `concat`.
    pub kinds: Vec<String>,
    pub selected: Vec<String>,
    /// Probe points drawn until one cleared every kink by the margin.
    pub probes: usize,
    pub loss: f64,
    /// `max |analytic − fd| / max |fd|`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub trials: Vec<TrialResult>,
    pub max_rel_error: f64,
}

struct Chain {
    layers: Vec<LayerSpec>,
}

impl Chain {
    fn add(&mut self, kind: LayerKind, inputs: &[&str]) -> String {
        let id = format!("l{}", self.layers.len());
        self.layers.push(LayerSpec::new(&id, kind, inputs));
        id
    }

    fn conv_relu(&mut self, rng: &mut Rng, input: &str, kernel: usize, stride: usize) -> String {
        let conv = self.add(
            LayerKind::Conv2d {
                out_channels: 2 + rng.below(3),
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding: kernel / 2,
            },
            &[input],
        );
        self.add(LayerKind::Relu, &[&conv])
    }
}

/// Builds a small random network. `variant` picks the topology family:
/// even variants are plain conv stacks, odd ones contain a two-branch
/// Concat block; bit 1 chooses max- versus average-pooling.
pub fn random_network(rng: &mut Rng, variant: usize) -> Result<Model> {
    let channels = 1 + rng.below(3);
    let side = 6 + rng.below(3);
    let input_shape = [channels, side, side];
    let mut chain = Chain { layers: Vec::new() };
    let norm = chain.add(
        LayerKind::InputNorm {
            mean: (0..channels).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            scale: rng.uniform(0.5, 1.5),
        },
        &[INPUT],
    );
    let pool = if variant & 2 == 0 {
        LayerKind::MaxPool {
            window: 2,
            stride: 2,
        }
    } else {
        LayerKind::AvgPool {
            window: 2,
            stride: 2,
        }
    };
    let first_kernel = [1, 3][rng.below(2)];
    let mut last = chain.conv_relu(rng, &norm, first_kernel, 1);
    if variant % 2 == 1 {
        let a = chain.conv_relu(rng, &last, 1, 1);
        let b = chain.conv_relu(rng, &last, 3, 1);
        last = chain.add(LayerKind::Concat, &[&a, &b]);
        last = chain.add(pool, &[&last]);
    } else {
        last = chain.add(pool, &[&last]);
        for _ in 0..rng.below(3) {
            let stride = 1 + rng.below(2);
            last = chain.conv_relu(rng, &last, 3, stride);
        }
    }
    let classes = 2 + rng.below(3);
    let flat = chain.add(LayerKind::Flatten, &[&last]);
    let fc = chain.add(LayerKind::FullyConnected { out_dim: classes }, &[&flat]);
    chain.add(LayerKind::Softmax, &[&fc]);

    let spec = NetworkSpec {
        input_shape,
        class_count: classes,
        layers: chain.layers,
    };
    let mut model = Model::init(spec, rng)?;
    for p in model.params_mut().iter_mut().flatten() {
        for b in p.bias.data_mut() {
            *b = rng.uniform(-0.2, 0.2);
        }
    }
    Ok(model)
}

/// True when no ReLU preactivation lies within `margin` of zero and no
/// max-pool window has a runner-up within `margin` of its winner.
pub fn clear_of_kinks(model: &Model, x: &Tensor, margin: f64) -> Result<bool> {
    let trace = model.forward(x)?;
    let spec = model.spec();
    for (i, layer) in spec.layers.iter().enumerate() {
        let Some(src) = layer.inputs.first() else {
            continue;
        };
        if src == INPUT {
            continue;
        }
        let src_idx = model.layer_index(src).expect("validated spec");
        let input = trace.output(src_idx);
        match layer.kind {
            LayerKind::Relu => {
                if input.data().iter().any(|v| v.abs() <= margin) {
                    return Ok(false);
                }
            }
            LayerKind::MaxPool { window, stride } => {
                let s = model.layer_shape(i);
                let (n, c, oh, ow) = (input.batch(), s[0], s[1], s[2]);
                let (h, w) = (input.shape()[2], input.shape()[3]);
                debug_assert_eq!(pool_out_extent(h, window, stride), Some(oh));
                let data = input.data();
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                            for ky in 0..window {
                                for kx in 0..window {
                                    let v = data
                                        [plane * h * w + (oy * stride + ky) * w + ox * stride + kx];
                                    if v > top {
                                        second = top;
                                        top = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                            }
                            // A window of dead ReLU outputs is locally constant.
                            if top == 0.0 && second == 0.0 {
                                continue;
                            }
                            if top - second <= margin {
                                return Ok(false);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(true)
}

/// Checks one network: draws probe points until one is clear of kinks,
/// then compares the analytic gradient with central differences.
pub fn check_model(model: &Model, rng: &mut Rng, trial: usize) -> Result<Option<TrialResult>> {
    let sel = select_layers(model.spec(), &SelectionPolicy::Auto)?;
    let [c, h, w] = model.input_shape();
    for probes in 1..=MAX_PROBES {
        let data = (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let delta = Tensor::new(vec![c, h, w], data)?;
        if !clear_of_kinks(model, &delta.clone().reshape(&[1, c, h, w])?, KINK_MARGIN)? {
            continue;
        }
        let analytic = fff_loss(model, &delta, &sel, EPS_FLOOR)?;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        let mut probe = delta.clone();
        for j in 0..delta.len() {
            let x0 = delta.data()[j];
            probe.data_mut()[j] = x0 + FD_STEP;
            let up = fff_loss(model, &probe, &sel, EPS_FLOOR)?.value;
            probe.data_mut()[j] = x0 - FD_STEP;
            let down = fff_loss(model, &probe, &sel, EPS_FLOOR)?.value;
            probe.data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((analytic.grad.data()[j] - fd).abs());
            scale = scale.max(fd.abs());
        }
        let rel_error = if scale > 0.0 { worst / scale } else { worst };
        return Ok(Some(TrialResult {
            trial,
            input_shape: model.input_shape(),
            kinds: model
                .spec()
                .layers
                .iter()
                .map(|l| l.kind.name().to_string())
                .collect(),
            selected: sel.ids.clone(),
            probes,
            loss: analytic.value,
            rel_error,
        }));
    }
    Ok(None)
}

/// Runs `trials` random networks, cycling through every topology variant.
/// Networks for which no kink-free probe point is found are regenerated.
pub fn run(seed: u64, trials: usize) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut results = Vec::with_capacity(trials);
    let mut attempt = 0;
    while results.len() < trials {
        let model = random_network(&mut rng, attempt)?;
        attempt += 1;
        if let Some(r) = check_model(&model, &mut rng, results.len())? {
            results.push(r);
        }
    }
    let max_rel_error = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        trials: results,
        max_rel_error,
    })
}
