//! Layer vocabulary, network graphs, and the forward/reverse engine.
//!
//! A network is a topologically ordered list of layers. Each layer names its
//! predecessors by id; the reserved id [`INPUT`] refers to the image batch
//! fed to the network. Per-sample extents are `[C, H, W]` for feature maps
//! and `[F]` after flattening.

mod engine;
mod kernels;
mod model;
pub mod presets;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use engine::{
    input_gradient, param_gradient, ForwardTrace, Gradients, LayerMeans, Logit, Objective, Seed,
};
pub use kernels::{conv_out_extent, pool_out_extent};
pub(crate) use model::param_shapes;
pub use model::{LayerParams, Model};

/// Reserved predecessor id for the network input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `(x - mean[c]) * scale`, applied in raw pixel space.
    InputNorm {
        mean: Vec<f64>,
        scale: f64,
    },
    /// Zero-padded cross-correlation.
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    FullyConnected {
        out_dim: usize,
    },
    /// Concatenation along the channel (first per-sample) axis.
    Concat,
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::InputNorm { .. } => "input_norm",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Concat => "concat",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

/// Where a layer reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Source {
    Input,
    Layer(usize),
}

/// Validated graph: resolved predecessor indices and per-sample extents.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub sources: Vec<Vec<Source>>,
    pub shapes: Vec<Vec<usize>>,
    pub consumers: Vec<Vec<usize>>,
    pub index: HashMap<String, usize>,
    pub softmax: usize,
}

impl NetworkSpec {
    pub(crate) fn plan(&self) -> Result<Plan> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Network(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Network("class_count must be at least 2".into()));
        }
        let n = self.layers.len();
        let mut index: HashMap<String, usize> = HashMap::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(n);
        let mut consumers = vec![Vec::<usize>::new(); n];
        let mut softmax = None;

        for (i, layer) in self.layers.iter().enumerate() {
            if layer.id == INPUT || layer.id.is_empty() {
                return Err(Error::Network(format!(
                    "layer {i} uses reserved or empty id {:?}",
                    layer.id
                )));
            }
            if index.contains_key(&layer.id) {
                return Err(Error::Network(format!("duplicate layer id {:?}", layer.id)));
            }
            let is_concat = matches!(layer.kind, LayerKind::Concat);
            match (layer.inputs.len(), is_concat) {
                (0, _) => {
                    return Err(Error::Network(format!(
                        "layer {:?} has no inputs",
                        layer.id
                    )))
                }
                (1, _) | (_, true) => {}
                (_, false) => {
                    return Err(Error::Network(format!(
                        "layer {:?} has {} inputs; only concat may take several",
                        layer.id,
                        layer.inputs.len()
                    )))
                }
            }
            let mut srcs = Vec::with_capacity(layer.inputs.len());
            for name in &layer.inputs {
                if name == INPUT {
                    srcs.push(Source::Input);
                } else if let Some(&j) = index.get(name.as_str()) {
                    consumers[j].push(i);
                    srcs.push(Source::Layer(j));
                } else {
                    return Err(Error::Network(format!(
                        "layer {:?} references unknown or later layer {name:?}",
                        layer.id
                    )));
                }
            }
            let in_shapes: Vec<&[usize]> = srcs
                .iter()
                .map(|s| match s {
                    Source::Input => &self.input_shape[..],
                    Source::Layer(j) => shapes[*j].as_slice(),
                })
                .collect();
            let out = infer_layer(layer, &in_shapes, self.class_count)?;
            if matches!(layer.kind, LayerKind::Softmax) {
                if softmax.is_some() {
                    return Err(Error::Network("more than one softmax layer".into()));
                }
                softmax = Some(i);
            }
            index.insert(layer.id.clone(), i);
            sources.push(srcs);
            shapes.push(out);
        }
        let softmax = softmax.ok_or_else(|| Error::Network("no softmax layer".into()))?;
        if softmax != n - 1 {
            return Err(Error::Network("softmax must be the last layer".into()));
        }
        if let Some(dangling) = (0..n - 1).find(|&i| consumers[i].is_empty()) {
            return Err(Error::Network(format!(
                "layer {:?} does not feed the output",
                self.layers[dangling].id
            )));
        }
        Ok(Plan {
            sources,
            shapes,
            consumers,
            index,
            softmax,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }
}

fn infer_layer(layer: &LayerSpec, ins: &[&[usize]], class_count: usize) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::Network(format!("layer {:?}: {msg}", layer.id));
    let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
        match s {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(bad(format!("expects a [C, H, W] input, got {s:?}"))),
        }
    };
    let first = ins[0];
    match &layer.kind {
        LayerKind::InputNorm { mean, scale } => {
            let (c, _, _) = spatial(first)?;
            if mean.len() != c {
                return Err(bad(format!("{} means for {c} channels", mean.len())));
            }
            if !(scale.is_finite() && *scale > 0.0) || mean.iter().any(|m| !m.is_finite()) {
                return Err(bad(
                    "normalization constants must be finite, scale > 0".into()
                ));
            }
            Ok(first.to_vec())
        }
        LayerKind::Conv2d {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let (_, h, w) = spatial(first)?;
            if *out_channels == 0 || *kernel_h == 0 || *kernel_w == 0 || *stride == 0 {
                return Err(bad("channels, kernel and stride must be positive".into()));
            }
            let oh = conv_out_extent(h, *kernel_h, *stride, *padding).ok_or_else(|| {
                bad(format!(
                    "kernel {kernel_h} does not fit height {h} with padding {padding}"
                ))
            })?;
            let ow = conv_out_extent(w, *kernel_w, *stride, *padding).ok_or_else(|| {
                bad(format!(
                    "kernel {kernel_w} does not fit width {w} with padding {padding}"
                ))
            })?;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
            let (c, h, w) = spatial(first)?;
            if *window == 0 || *stride == 0 {
                return Err(bad("window and stride must be positive".into()));
            }
            let oh = pool_out_extent(h, *window, *stride)
                .ok_or_else(|| bad(format!("window {window} does not fit height {h}")))?;
            let ow = pool_out_extent(w, *window, *stride)
                .ok_or_else(|| bad(format!("window {window} does not fit width {w}")))?;
            Ok(vec![c, oh, ow])
        }
        LayerKind::Relu => Ok(first.to_vec()),
        LayerKind::Flatten => Ok(vec![first.iter().product()]),
        LayerKind::FullyConnected { out_dim } => {
            if first.len() != 1 {
                return Err(bad(format!("expects a flat input, got {first:?}")));
            }
            if *out_dim == 0 {
                return Err(bad("out_dim must be positive".into()));
            }
            Ok(vec![*out_dim])
        }
        LayerKind::Concat => {
            let rank = first.len();
            if ins.iter().any(|s| s.len() != rank || s[1..] != first[1..]) {
                return Err(bad(format!(
                    "inputs disagree off the channel axis: {ins:?}"
                )));
            }
            let mut out = first.to_vec();
            out[0] = ins.iter().map(|s| s[0]).sum();
            Ok(out)
        }
        LayerKind::Softmax => {
            if first != [class_count] {
                return Err(bad(format!(
                    "expects [{class_count}] logits, got {first:?}"
                )));
            }
            Ok(first.to_vec())
        }
    }
}

/// Per-sample output extents of every layer, keyed by layer id.
pub fn infer_shapes(spec: &NetworkSpec) -> Result<BTreeMap<String, Vec<usize>>> {
    let plan = spec.plan()?;
    Ok(spec
        .layers
        .iter()
        .zip(plan.shapes)
        .map(|(l, s)| (l.id.clone(), s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out: usize, k: usize, pad: usize) -> LayerKind {
        LayerKind::Conv2d {
            out_channels: out,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: pad,
        }
    }

    fn net(input: [usize; 3], body: Vec<LayerSpec>) -> NetworkSpec {
        let mut layers = body;
        let last = layers
            .last()
            .map(|l| l.id.clone())
            .unwrap_or_else(|| INPUT.into());
        layers.push(LayerSpec::new("flat", LayerKind::Flatten, &[&last]));
        layers.push(LayerSpec::new(
            "fc",
            LayerKind::FullyConnected { out_dim: 3 },
            &["flat"],
        ));
        layers.push(LayerSpec::new("prob", LayerKind::Softmax, &["fc"]));
        NetworkSpec {
            input_shape: input,
            class_count: 3,
            layers,
        }
    }

    #[test]
    fn same_padding_conv() {
        let spec = net(
            [1, 8, 8],
            vec![LayerSpec::new("c", conv(4, 3, 1), &[INPUT])],
        );
        assert_eq!(infer_shapes(&spec).unwrap()["c"], vec![4, 8, 8]);
    }

    #[test]
    fn pooling_halves() {
        let spec = net(
            [2, 8, 8],
            vec![LayerSpec::new(
                "p",
                LayerKind::MaxPool {
                    window: 2,
                    stride: 2,
                },
                &[INPUT],
            )],
        );
        let shapes = infer_shapes(&spec).unwrap();
        assert_eq!(shapes["p"], vec![2, 4, 4]);
        assert_eq!(shapes["flat"], vec![32]);
    }

    #[test]
    fn kernel_larger_than_input_rejected() {
        let spec = net(
            [1, 3, 3],
            vec![LayerSpec::new("c", conv(1, 5, 0), &[INPUT])],
        );
        assert!(matches!(infer_shapes(&spec), Err(Error::Network(_))));
    }

    #[test]
    fn dangling_reference_rejected() {
        let spec = net(
            [1, 4, 4],
            vec![LayerSpec::new("c", conv(1, 3, 1), &["ghost"])],
        );
        assert!(spec.validate().is_err());
    }

    #[test]
    fn concat_sums_channels_and_checks_extents() {
        let spec = net(
            [1, 6, 6],
            vec![
                LayerSpec::new("a", conv(2, 3, 1), &[INPUT]),
                LayerSpec::new("b", conv(3, 1, 0), &[INPUT]),
                LayerSpec::new("cat", LayerKind::Concat, &["a", "b"]),
            ],
        );
        assert_eq!(infer_shapes(&spec).unwrap()["cat"], vec![5, 6, 6]);

        let spec = net(
            [1, 6, 6],
            vec![
                LayerSpec::new("a", conv(2, 3, 0), &[INPUT]),
                LayerSpec::new("b", conv(3, 1, 0), &[INPUT]),
                LayerSpec::new("cat", LayerKind::Concat, &["a", "b"]),
            ],
        );
        assert!(spec.validate().is_err());
    }

    #[test]
    fn only_concat_takes_several_inputs() {
        let spec = net(
            [1, 4, 4],
            vec![
                LayerSpec::new("a", LayerKind::Relu, &[INPUT]),
                LayerSpec::new("b", LayerKind::Relu, &[INPUT, "a"]),
            ],
        );
        assert!(spec.validate().is_err());
    }

    #[test]
    fn softmax_rules() {
        let mut spec = net([1, 4, 4], vec![]);
        spec.layers
            .push(LayerSpec::new("prob2", LayerKind::Softmax, &["prob"]));
        assert!(spec.validate().is_err());

        let mut spec = net([1, 4, 4], vec![]);
        spec.layers.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn layer_json_is_flat_and_tagged() {
        let l = LayerSpec::new("c1", conv(4, 3, 1), &[INPUT]);
        let text = serde_json::to_string(&l).unwrap();
        assert!(text.contains("\"kind\":\"conv2d\""), "{text}");
        let back: LayerSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, l);
    }
}
