//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use featurefool::nn::{LayerKind, LayerParams, LayerSpec, Model, NetworkSpec, INPUT};
use featurefool::{Rng, Tensor};

/// Direct nested-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &[f64],
    [c, h, w]: [usize; 3],
    weight: &[f64],
    bias: &[f64],
    oc: usize,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 3]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[o];
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((o * c + ci) * kh + ky) * kw + kx]
                                * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    (out, [oc, oh, ow])
}

pub fn pool(
    x: &[f64],
    [c, h, w]: [usize; 3],
    window: usize,
    stride: usize,
    max: bool,
) -> (Vec<f64>, [usize; 3]) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut vals = Vec::new();
                for ky in 0..window {
                    for kx in 0..window {
                        vals.push(x[(ci * h + y * stride + ky) * w + xx * stride + kx]);
                    }
                }
                out.push(if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
    }
    (out, [c, oh, ow])
}

pub fn dense(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            b + x
                .iter()
                .enumerate()
                .map(|(i, v)| weight[o * x.len() + i] * v)
                .sum::<f64>()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-layer outputs of one sample, computed layer by layer with the naive
/// kernels above.
pub fn naive_forward(model: &Model, x: &[f64]) -> Vec<Vec<f64>> {
    let spec = model.spec();
    let mut outs: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for layer in &spec.layers {
        let fetch = |id: &str| -> (Vec<f64>, Vec<usize>) {
            if id == INPUT {
                (x.to_vec(), spec.input_shape.to_vec())
            } else {
                let j = spec.layers.iter().position(|l| l.id == id).unwrap();
                outs[j].clone()
            }
        };
        let (v, s) = fetch(&layer.inputs[0]);
        let dims3 = || [s[0], s[1], s[2]];
        let p = model.layer_params(&layer.id);
        let out = match &layer.kind {
            LayerKind::InputNorm { mean, scale } => {
                let plane = s[1] * s[2];
                let o = v
                    .iter()
                    .enumerate()
                    .map(|(i, a)| (a - mean[i / plane]) * scale)
                    .collect();
                (o, s.clone())
            }
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let p = p.unwrap();
                let (o, sh) = conv(
                    &v,
                    dims3(),
                    p.weight.data(),
                    p.bias.data(),
                    *out_channels,
                    (*kernel_h, *kernel_w),
                    *stride,
                    *padding,
                );
                (o, sh.to_vec())
            }
            LayerKind::Relu => (v.iter().map(|a| a.max(0.0)).collect(), s.clone()),
            LayerKind::MaxPool { window, stride } => {
                let (o, sh) = pool(&v, dims3(), *window, *stride, true);
                (o, sh.to_vec())
            }
            LayerKind::AvgPool { window, stride } => {
                let (o, sh) = pool(&v, dims3(), *window, *stride, false);
                (o, sh.to_vec())
            }
            LayerKind::Flatten => {
                let n = v.len();
                (v, vec![n])
            }
            LayerKind::FullyConnected { out_dim } => {
                let p = p.unwrap();
                (dense(&v, p.weight.data(), p.bias.data()), vec![*out_dim])
            }
            LayerKind::Concat => {
                let mut o = Vec::new();
                let mut ch = 0;
                for id in &layer.inputs {
                    let (vi, si) = fetch(id);
                    o.extend(vi);
                    ch += si[0];
                }
                let mut sh = s.clone();
                sh[0] = ch;
                (o, sh)
            }
            LayerKind::Softmax => (softmax(&v), s.clone()),
        };
        outs.push(out);
    }
    outs.into_iter().map(|(v, _)| v).collect()
}

/// He-initialised model with small random biases.
pub fn random_model(spec: NetworkSpec, rng: &mut Rng) -> Model {
    let mut m = Model::init(spec, rng).unwrap();
    for p in m.params_mut().iter_mut().flatten() {
        for b in p.bias.data_mut() {
            *b = rng.uniform(-0.2, 0.2);
        }
    }
    m
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    featurefool::numerics::uniform_init(shape, lo, hi, rng).unwrap()
}

/// Builds a model from explicit weights, in layer order.
pub fn model_with(spec: NetworkSpec, weights: Vec<Option<(Tensor, Tensor)>>) -> Model {
    let params = weights
        .into_iter()
        .map(|w| w.map(|(weight, bias)| LayerParams { weight, bias }))
        .collect();
    Model::new(spec, params).unwrap()
}

pub fn layer(id: &str, kind: LayerKind, inputs: &[&str]) -> LayerSpec {
    LayerSpec::new(id, kind, inputs)
}

pub fn conv_kind(out: usize, k: usize, stride: usize, pad: usize) -> LayerKind {
    LayerKind::Conv2d {
        out_channels: out,
        kernel_h: k,
        kernel_w: k,
        stride,
        padding: pad,
    }
}

/// A random conv / pool / dense network of 2–4 parameterised layers with
/// varied geometry, for comparing the engine against the naive oracle.
pub fn random_plain_spec(rng: &mut Rng) -> NetworkSpec {
    let c = 1 + rng.below(3);
    let side = 7 + rng.below(6);
    let mut layers = vec![layer(
        "norm",
        LayerKind::InputNorm {
            mean: (0..c).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            scale: rng.uniform(0.5, 2.0),
        },
        &[INPUT],
    )];
    let mut prev = "norm".to_string();
    let mut extent = side;
    let convs = 1 + rng.below(3);
    for i in 0..convs {
        let k = [1, 2, 3, 5][rng.below(4)].min(extent);
        let pad = rng.below(k / 2 + 1);
        let stride = 1 + rng.below(2);
        let id = format!("conv{i}");
        layers.push(layer(
            &id,
            conv_kind(1 + rng.below(4), k, stride, pad),
            &[&prev],
        ));
        extent = (extent + 2 * pad - k) / stride + 1;
        let relu = format!("relu{i}");
        layers.push(layer(&relu, LayerKind::Relu, &[&id]));
        prev = relu;
        if extent >= 2 && rng.below(2) == 0 {
            let window = 2 + rng.below(extent.min(3) - 1);
            let stride = 1 + rng.below(2);
            let kind = if rng.below(2) == 0 {
                LayerKind::MaxPool { window, stride }
            } else {
                LayerKind::AvgPool { window, stride }
            };
            let id = format!("pool{i}");
            layers.push(layer(&id, kind, &[&prev]));
            extent = (extent - window) / stride + 1;
            prev = id;
        }
    }
    let classes = 2 + rng.below(5);
    layers.push(layer("flat", LayerKind::Flatten, &[&prev]));
    layers.push(layer(
        "fc",
        LayerKind::FullyConnected { out_dim: classes },
        &["flat"],
    ));
    layers.push(layer("prob", LayerKind::Softmax, &["fc"]));
    NetworkSpec {
        input_shape: [c, side, side],
        class_count: classes,
        layers,
    }
}

/// Outcome counts of decoding corrupted copies of a file.
#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub rejected: usize,
    pub accepted: usize,
    pub panicked: usize,
}

/// Decodes `count` mutants of `bytes`: even ones truncated at a random
/// length, odd ones with a single random bit flipped.
pub fn fuzz_decode<T, E>(
    bytes: &[u8],
    count: usize,
    seed: u64,
    decode: impl Fn(&[u8]) -> Result<T, E>,
) -> FuzzOutcome {
    let mut rng = Rng::new(seed);
    let mut out = FuzzOutcome::default();
    for i in 0..count {
        let mut m = bytes.to_vec();
        if i % 2 == 0 {
            m.truncate(rng.below(bytes.len()));
        } else {
            let bit = rng.below(bytes.len() * 8);
            m[bit / 8] ^= 1 << (bit % 8);
        }
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| decode(&m).is_err())) {
            Ok(true) => out.rejected += 1,
            Ok(false) => out.accepted += 1,
            Err(_) => out.panicked += 1,
        }
    }
    out
}

/// Appends the FNV-1a trailer, producing a well-sealed file.
pub fn reseal(mut bytes: Vec<u8>) -> Vec<u8> {
    let d = featurefool::io::fnv1a64(&bytes);
    bytes.extend_from_slice(&d.to_le_bytes());
    bytes
}

/// Splits a sealed frame into (JSON header, body).
pub fn unframe(bytes: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    (
        bytes[10..10 + len].to_vec(),
        bytes[10 + len..bytes.len() - 8].to_vec(),
    )
}

/// Builds a sealed frame from its parts.
pub fn frame(magic: &[u8; 4], version: u16, header: &[u8], body: &[u8]) -> Vec<u8> {
    let mut b = magic.to_vec();
    b.extend(version.to_le_bytes());
    b.extend((header.len() as u32).to_le_bytes());
    b.extend_from_slice(header);
    b.extend_from_slice(body);
    reseal(b)
}
