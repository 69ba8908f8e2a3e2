use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::nn::{LayerKind, NetworkSpec, Plan};
use crate::numerics::{Rng, Tensor};

/// Kernel and bias of a convolution or fully connected layer.
///
/// Conv kernels are `[out, in, kh, kw]`; dense weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub(crate) fn zeros_like(&self) -> LayerParams {
        LayerParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// A validated network together with its weights.
#[derive(Debug, Clone)]
pub struct Model {
    spec: NetworkSpec,
    pub(crate) plan: Plan,
    params: Vec<Option<LayerParams>>,
    digest: OnceLock<u64>,
}

/// Expected `(weight, bias)` shapes for layer `i`, if it has parameters.
pub(crate) fn param_shapes(
    spec: &NetworkSpec,
    plan: &Plan,
    i: usize,
) -> Option<(Vec<usize>, Vec<usize>)> {
    let in_shape = match plan.sources[i][0] {
        crate::nn::Source::Input => spec.input_shape.to_vec(),
        crate::nn::Source::Layer(j) => plan.shapes[j].clone(),
    };
    match &spec.layers[i].kind {
        LayerKind::Conv2d {
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => Some((
            vec![*out_channels, in_shape[0], *kernel_h, *kernel_w],
            vec![*out_channels],
        )),
        LayerKind::FullyConnected { out_dim } => {
            Some((vec![*out_dim, in_shape[0]], vec![*out_dim]))
        }
        _ => None,
    }
}

impl Model {
    /// Builds a model from explicit parameters, one entry per layer
    /// (`None` for parameter-free layers).
    pub fn new(spec: NetworkSpec, params: Vec<Option<LayerParams>>) -> Result<Self> {
        let plan = spec.plan()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter slots for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let id = &spec.layers[i].id;
            match (param_shapes(&spec, &plan, i), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::Shape(format!(
                            "layer {id:?}: weight {:?} / bias {:?}, expected {ws:?} / {bs:?}",
                            p.weight.shape(),
                            p.bias.shape()
                        )));
                    }
                    if !p.weight.all_finite() || !p.bias.all_finite() {
                        return Err(Error::NonFinite(format!("layer {id:?} parameters")));
                    }
                }
                (Some(_), None) => {
                    return Err(Error::Shape(format!("layer {id:?} is missing parameters")))
                }
                (None, Some(_)) => {
                    return Err(Error::Shape(format!("layer {id:?} takes no parameters")))
                }
            }
        }
        Ok(Model {
            spec,
            plan,
            params,
            digest: OnceLock::new(),
        })
    }

    /// He-normal kernels and zero biases.
    pub fn init(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let plan = spec.plan()?;
        let params = (0..spec.layers.len())
            .map(|i| {
                param_shapes(&spec, &plan, i).map(|(ws, bs)| {
                    let fan_in: usize = ws[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let n: usize = ws.iter().product();
                    let data = (0..n).map(|_| std * rng.normal()).collect();
                    LayerParams {
                        weight: Tensor::from_parts(ws, data),
                        bias: Tensor::zeros(&bs),
                    }
                })
            })
            .collect();
        Model::new(spec, params)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.plan.index.get(id).copied()
    }

    /// Per-sample output extents of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.plan.shapes[i]
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn layer_params(&self, id: &str) -> Option<&LayerParams> {
        self.layer_index(id).and_then(|i| self.params[i].as_ref())
    }

    /// Mutable access to the weights; invalidates the cached digest.
    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        self.digest.take();
        &mut self.params
    }

    /// Rounds every weight to the nearest `f32`, the precision models are
    /// stored at.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut().iter_mut().flatten() {
            for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// FNV-1a digest of the model's canonical serialized form.
    pub fn digest(&self) -> u64 {
        *self.digest.get_or_init(|| crate::io::model_digest(self))
    }
}
