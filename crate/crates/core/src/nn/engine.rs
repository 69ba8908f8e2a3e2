use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom, PoolGeom};
use crate::nn::{LayerKind, LayerParams, Model, Source};
use crate::numerics::Tensor;

/// Cross-entropy floor inside the log.
pub(crate) const CE_FLOOR: f64 = 1e-12;

/// Every layer's output for one batch, plus what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    outputs: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    ids: Vec<String>,
    logits_layer: usize,
    softmax_layer: usize,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn batch(&self) -> usize {
        self.input.batch()
    }

    /// Output of layer `i` (post-nonlinearity for ReLU layers).
    pub fn output(&self, i: usize) -> &Tensor {
        &self.outputs[i]
    }

    pub fn activation(&self, id: &str) -> Option<&Tensor> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| &self.outputs[i])
    }

    pub fn logits(&self) -> &Tensor {
        &self.outputs[self.logits_layer]
    }

    pub fn logits_layer(&self) -> usize {
        self.logits_layer
    }

    pub fn softmax_layer(&self) -> usize {
        self.softmax_layer
    }

    pub fn probabilities(&self) -> &Tensor {
        &self.outputs[self.softmax_layer]
    }

    /// Arg-max class of sample `n`; ties go to the lowest index.
    pub fn predicted_label(&self, n: usize) -> usize {
        argmax(self.logits().item(n))
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch()).map(|n| self.predicted_label(n)).collect()
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gradient injected at a layer's output.
#[derive(Debug, Clone)]
pub struct Seed {
    pub layer: usize,
    pub grad: Tensor,
}

/// Reverse-pass result.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Gradient w.r.t. the network input (zeros when not requested).
    pub input: Tensor,
    /// Per-layer parameter gradients (present only when requested).
    pub params: Vec<Option<LayerParams>>,
}

impl Gradients {
    pub fn param(&self, model: &Model, id: &str) -> Option<&LayerParams> {
        model.layer_index(id).and_then(|i| self.params[i].as_ref())
    }
}

/// A scalar function of a forward trace with its gradient expressed as
/// seeds at layer outputs.
pub trait Objective {
    fn evaluate(&self, model: &Model, trace: &ForwardTrace) -> Result<(f64, Vec<Seed>)>;
}

impl<F> Objective for F
where
    F: Fn(&Model, &ForwardTrace) -> Result<(f64, Vec<Seed>)>,
{
    fn evaluate(&self, model: &Model, trace: &ForwardTrace) -> Result<(f64, Vec<Seed>)> {
        self(model, trace)
    }
}

/// Sum over the batch of one logit.
#[derive(Debug, Clone, Copy)]
pub struct Logit(pub usize);

impl Objective for Logit {
    fn evaluate(&self, _model: &Model, trace: &ForwardTrace) -> Result<(f64, Vec<Seed>)> {
        let logits = trace.logits();
        let classes = logits.item_len();
        if self.0 >= classes {
            return Err(Error::InvalidArgument(format!(
                "logit {} of {classes}",
                self.0
            )));
        }
        let mut grad = Tensor::zeros(logits.shape());
        let mut value = 0.0;
        for n in 0..logits.batch() {
            value += logits.item(n)[self.0];
            grad.item_mut(n)[self.0] = 1.0;
        }
        Ok((
            value,
            vec![Seed {
                layer: trace.logits_layer,
                grad,
            }],
        ))
    }
}

/// Sum of the means (over all elements) of the listed layers' outputs.
#[derive(Debug, Clone)]
pub struct LayerMeans(pub Vec<usize>);

impl Objective for LayerMeans {
    fn evaluate(&self, _model: &Model, trace: &ForwardTrace) -> Result<(f64, Vec<Seed>)> {
        let mut value = 0.0;
        let mut seeds = Vec::with_capacity(self.0.len());
        for &layer in &self.0 {
            let out = trace.output(layer);
            value += out.mean();
            seeds.push(Seed {
                layer,
                grad: Tensor::full(out.shape(), 1.0 / out.len() as f64),
            });
        }
        Ok((value, seeds))
    }
}

fn batched(n: usize, item: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(item.len() + 1);
    s.push(n);
    s.extend_from_slice(item);
    s
}

fn conv_geom(model: &Model, i: usize, in_shape: &[usize]) -> ConvGeom {
    let out = model.layer_shape(i);
    match model.spec().layers[i].kind {
        LayerKind::Conv2d {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => ConvGeom {
            in_c: in_shape[0],
            in_h: in_shape[1],
            in_w: in_shape[2],
            out_c: out_channels,
            out_h: out[1],
            out_w: out[2],
            kh: kernel_h,
            kw: kernel_w,
            stride,
            pad: padding,
        },
        _ => unreachable!("not a convolution"),
    }
}

fn pool_geom(
    model: &Model,
    i: usize,
    in_shape: &[usize],
    window: usize,
    stride: usize,
) -> PoolGeom {
    let out = model.layer_shape(i);
    PoolGeom {
        c: in_shape[0],
        in_h: in_shape[1],
        in_w: in_shape[2],
        out_h: out[1],
        out_w: out[2],
        window,
        stride,
    }
}

impl Model {
    fn source_shape(&self, src: Source) -> &[usize] {
        match src {
            Source::Input => &self.spec().input_shape[..],
            Source::Layer(j) => self.layer_shape(j),
        }
    }

    /// Runs the network on an `[N, C, H, W]` batch, recording every layer.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        let [c, h, w] = self.input_shape();
        if x.shape().len() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::Shape(format!(
                "input {:?} does not match [N, {c}, {h}, {w}]",
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        let n = x.batch();
        let layers = &self.spec().layers;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(layers.len());
        let mut pool_argmax = vec![None; layers.len()];
        let mut col = Vec::new();

        for (i, layer) in layers.iter().enumerate() {
            let srcs = &self.plan.sources[i];
            let src = |k: usize| -> &Tensor {
                match srcs[k] {
                    Source::Input => x,
                    Source::Layer(j) => &outputs[j],
                }
            };
            let in_shape = self.source_shape(srcs[0]);
            let mut out = Tensor::zeros(&batched(n, self.layer_shape(i)));
            match &layer.kind {
                LayerKind::InputNorm { mean, scale } => {
                    let plane = in_shape[1] * in_shape[2];
                    for (k, (o, v)) in out.data_mut().iter_mut().zip(src(0).data()).enumerate() {
                        *o = (v - mean[(k / plane) % in_shape[0]]) * scale;
                    }
                }
                LayerKind::Conv2d { .. } => {
                    let g = conv_geom(self, i, in_shape);
                    let p = self.params()[i].as_ref().expect("validated");
                    for s in 0..n {
                        kernels::conv_forward(
                            &g,
                            src(0).item(s),
                            p.weight.data(),
                            p.bias.data(),
                            out.item_mut(s),
                            &mut col,
                        );
                    }
                }
                LayerKind::Relu => {
                    for (o, v) in out.data_mut().iter_mut().zip(src(0).data()) {
                        *o = if *v > 0.0 { *v } else { 0.0 };
                    }
                }
                LayerKind::MaxPool { window, stride } => {
                    let g = pool_geom(self, i, in_shape, *window, *stride);
                    let per = out.item_len();
                    let mut arg = vec![0usize; n * per];
                    for s in 0..n {
                        kernels::max_pool_forward(
                            &g,
                            src(0).item(s),
                            out.item_mut(s),
                            &mut arg[s * per..(s + 1) * per],
                        );
                    }
                    pool_argmax[i] = Some(arg);
                }
                LayerKind::AvgPool { window, stride } => {
                    let g = pool_geom(self, i, in_shape, *window, *stride);
                    for s in 0..n {
                        kernels::avg_pool_forward(&g, src(0).item(s), out.item_mut(s));
                    }
                }
                LayerKind::Flatten => out.data_mut().copy_from_slice(src(0).data()),
                LayerKind::FullyConnected { .. } => {
                    let p = self.params()[i].as_ref().expect("validated");
                    for s in 0..n {
                        kernels::dense_forward(
                            src(0).item(s),
                            p.weight.data(),
                            p.bias.data(),
                            out.item_mut(s),
                        );
                    }
                }
                LayerKind::Concat => {
                    for s in 0..n {
                        let mut at = 0;
                        let dst = out.item_mut(s);
                        for k in 0..srcs.len() {
                            let part = src(k).item(s);
                            dst[at..at + part.len()].copy_from_slice(part);
                            at += part.len();
                        }
                    }
                }
                LayerKind::Softmax => {
                    for s in 0..n {
                        kernels::softmax(src(0).item(s), out.item_mut(s));
                    }
                }
            }
            outputs.push(out);
        }
        let softmax_layer = self.plan.softmax;
        let logits_layer = match self.plan.sources[softmax_layer][0] {
            Source::Layer(j) => j,
            Source::Input => unreachable!("softmax over raw input is rejected by validation"),
        };
        Ok(ForwardTrace {
            input: x.clone(),
            outputs,
            pool_argmax,
            ids: layers.iter().map(|l| l.id.clone()).collect(),
            logits_layer,
            softmax_layer,
        })
    }

    /// Reverse pass from the given seeds.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        seeds: Vec<Seed>,
        want_input: bool,
        want_params: bool,
    ) -> Result<Gradients> {
        let layers = &self.spec().layers;
        let n = trace.batch();
        let mut grads: Vec<Option<Tensor>> = vec![None; layers.len()];
        for seed in seeds {
            let out = &trace.outputs[seed.layer];
            if seed.grad.shape() != out.shape() {
                return Err(Error::Shape(format!(
                    "seed for layer {:?}: {:?} vs output {:?}",
                    layers[seed.layer].id,
                    seed.grad.shape(),
                    out.shape()
                )));
            }
            match &mut grads[seed.layer] {
                Some(g) => g.add_assign(&seed.grad)?,
                slot => *slot = Some(seed.grad),
            }
        }
        let mut input_grad = Tensor::zeros(trace.input.shape());
        let mut param_grads: Vec<Option<LayerParams>> = if want_params {
            self.params()
                .iter()
                .map(|p| p.as_ref().map(LayerParams::zeros_like))
                .collect()
        } else {
            vec![None; layers.len()]
        };
        let mut col = Vec::new();

        for i in (0..layers.len()).rev() {
            let Some(dout) = grads[i].take() else {
                continue;
            };
            let srcs = self.plan.sources[i].clone();
            let needs = |s: Source| want_input || matches!(s, Source::Layer(_));
            let src_out = |s: Source| -> &Tensor {
                match s {
                    Source::Input => &trace.input,
                    Source::Layer(j) => &trace.outputs[j],
                }
            };
            let in_shape = self.source_shape(srcs[0]).to_vec();
            // Gradients flowing to each source, in source order.
            let mut dsrc: Vec<Option<Tensor>> = vec![None; srcs.len()];
            let alloc0 = |s: Source| Tensor::zeros(src_out(s).shape());

            match &layers[i].kind {
                LayerKind::InputNorm { scale, .. } => {
                    if needs(srcs[0]) {
                        let mut d = dout.clone();
                        d.scale(*scale);
                        dsrc[0] = Some(d);
                    }
                }
                LayerKind::Conv2d { .. } => {
                    let g = conv_geom(self, i, &in_shape);
                    let p = self.params()[i].as_ref().expect("validated");
                    let x = src_out(srcs[0]);
                    let mut dx = needs(srcs[0]).then(|| alloc0(srcs[0]));
                    let mut pg = param_grads[i].take();
                    for s in 0..n {
                        let dxs = dx.as_mut().map(|t| t.item_mut(s));
                        let dps = pg
                            .as_mut()
                            .map(|p| (p.weight.data_mut(), p.bias.data_mut()));
                        kernels::conv_backward(
                            &g,
                            x.item(s),
                            p.weight.data(),
                            dout.item(s),
                            dxs,
                            dps,
                            &mut col,
                        );
                    }
                    param_grads[i] = pg;
                    dsrc[0] = dx;
                }
                LayerKind::Relu => {
                    if needs(srcs[0]) {
                        let out = &trace.outputs[i];
                        let mut d = dout.clone();
                        for (g, &o) in d.data_mut().iter_mut().zip(out.data()) {
                            if o <= 0.0 {
                                *g = 0.0;
                            }
                        }
                        dsrc[0] = Some(d);
                    }
                }
                LayerKind::MaxPool { .. } => {
                    if needs(srcs[0]) {
                        let arg = trace.pool_argmax[i].as_ref().expect("recorded in forward");
                        let mut dx = alloc0(srcs[0]);
                        let per = dout.item_len();
                        for s in 0..n {
                            let dxs = dx.item_mut(s);
                            for (o, &g) in dout.item(s).iter().enumerate() {
                                dxs[arg[s * per + o]] += g;
                            }
                        }
                        dsrc[0] = Some(dx);
                    }
                }
                LayerKind::AvgPool { window, stride } => {
                    if needs(srcs[0]) {
                        let g = pool_geom(self, i, &in_shape, *window, *stride);
                        let mut dx = alloc0(srcs[0]);
                        for s in 0..n {
                            kernels::avg_pool_backward(&g, dout.item(s), dx.item_mut(s));
                        }
                        dsrc[0] = Some(dx);
                    }
                }
                LayerKind::Flatten => {
                    if needs(srcs[0]) {
                        dsrc[0] = Some(dout.clone().reshape(src_out(srcs[0]).shape())?);
                    }
                }
                LayerKind::FullyConnected { .. } => {
                    let p = self.params()[i].as_ref().expect("validated");
                    let x = src_out(srcs[0]);
                    let mut dx = needs(srcs[0]).then(|| alloc0(srcs[0]));
                    let mut pg = param_grads[i].take();
                    for s in 0..n {
                        let dxs = dx.as_mut().map(|t| t.item_mut(s));
                        let dps = pg
                            .as_mut()
                            .map(|p| (p.weight.data_mut(), p.bias.data_mut()));
                        kernels::dense_backward(x.item(s), p.weight.data(), dout.item(s), dxs, dps);
                    }
                    param_grads[i] = pg;
                    dsrc[0] = dx;
                }
                LayerKind::Concat => {
                    let mut offset = 0;
                    for (k, &s) in srcs.iter().enumerate() {
                        let part = src_out(s);
                        let len = part.item_len();
                        if needs(s) {
                            let mut d = Tensor::zeros(part.shape());
                            for b in 0..n {
                                d.item_mut(b)
                                    .copy_from_slice(&dout.item(b)[offset..offset + len]);
                            }
                            dsrc[k] = Some(d);
                        }
                        offset += len;
                    }
                }
                LayerKind::Softmax => {
                    if needs(srcs[0]) {
                        let sm = &trace.outputs[i];
                        let mut dx = alloc0(srcs[0]);
                        for b in 0..n {
                            let (s, g) = (sm.item(b), dout.item(b));
                            let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                            for ((d, &sv), &gv) in dx.item_mut(b).iter_mut().zip(s).zip(g) {
                                *d = sv * (gv - dot);
                            }
                        }
                        dsrc[0] = Some(dx);
                    }
                }
            }

            for (s, d) in srcs.into_iter().zip(dsrc) {
                let Some(d) = d else { continue };
                match s {
                    Source::Input => input_grad.add_assign(&d)?,
                    Source::Layer(j) => match &mut grads[j] {
                        Some(g) => g.add_assign(&d)?,
                        slot => *slot = Some(d),
                    },
                }
            }
        }
        Ok(Gradients {
            input: input_grad,
            params: param_grads,
        })
    }
}

/// Value of `objective` at `x` and its gradient with respect to `x`.
pub fn input_gradient(
    model: &Model,
    x: &Tensor,
    objective: &dyn Objective,
) -> Result<(f64, Tensor)> {
    let trace = model.forward(x)?;
    let (value, seeds) = objective.evaluate(model, &trace)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective value {value}")));
    }
    let grads = model.backward(&trace, seeds, true, false)?;
    if !grads.input.all_finite() {
        return Err(Error::NonFinite("input gradient".into()));
    }
    Ok((value, grads.input))
}

/// Mean cross-entropy of `batch` against `labels` and its gradient with
/// respect to every weight tensor.
pub fn param_gradient(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
    if batch.shape().is_empty() || batch.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for batch {:?}",
            labels.len(),
            batch.shape()
        )));
    }
    let classes = model.class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    let trace = model.forward(batch)?;
    let probs = trace.probabilities();
    let n = labels.len() as f64;
    let loss = cross_entropy(&trace, labels);
    let mut seed = Tensor::zeros(probs.shape());
    for (b, &y) in labels.iter().enumerate() {
        seed.item_mut(b)[y] = -1.0 / (n * (probs.item(b)[y] + CE_FLOOR));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy {loss}")));
    }
    let grads = model.backward(
        &trace,
        vec![Seed {
            layer: trace.softmax_layer,
            grad: seed,
        }],
        false,
        true,
    )?;
    Ok((loss, grads))
}

/// Mean cross-entropy without gradients.
pub(crate) fn cross_entropy(trace: &ForwardTrace, labels: &[usize]) -> f64 {
    let probs = trace.probabilities();
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -(probs.item(b)[y] + CE_FLOOR).ln() / n)
        .sum()
}
