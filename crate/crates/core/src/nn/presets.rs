//! Reference architectures used as victim networks.

use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerSpec, NetworkSpec, INPUT};

/// Per-channel mean and a global scale applied by the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            scale: 1.0,
        }
    }
}

pub const NAMES: [&str; 3] = ["convA", "convB", "branchy"];

fn conv(out: usize, k: usize, pad: usize) -> LayerKind {
    LayerKind::Conv2d {
        out_channels: out,
        kernel_h: k,
        kernel_w: k,
        stride: 1,
        padding: pad,
    }
}

fn pool() -> LayerKind {
    LayerKind::MaxPool {
        window: 2,
        stride: 2,
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new(norm: &Normalization) -> Self {
        Builder {
            layers: vec![LayerSpec::new(
                "norm",
                LayerKind::InputNorm {
                    mean: norm.mean.clone(),
                    scale: norm.scale,
                },
                &[INPUT],
            )],
        }
    }

    fn push(&mut self, id: &str, kind: LayerKind, inputs: &[&str]) -> &mut Self {
        self.layers.push(LayerSpec::new(id, kind, inputs));
        self
    }

    /// Appends `kind` fed by the previous layer.
    fn then(&mut self, id: &str, kind: LayerKind) -> &mut Self {
        let prev = self.layers.last().expect("norm layer").id.clone();
        self.push(id, kind, &[&prev])
    }

    fn head(&mut self, classes: usize) -> Vec<LayerSpec> {
        self.then("flatten", LayerKind::Flatten)
            .then("fc", LayerKind::FullyConnected { out_dim: classes })
            .then("prob", LayerKind::Softmax);
        std::mem::take(&mut self.layers)
    }
}

/// conv5×5/16 – ReLU – maxpool – conv5×5/32 – ReLU – maxpool – FC.
pub fn conv_a(
    input_shape: [usize; 3],
    classes: usize,
    norm: &Normalization,
) -> Result<NetworkSpec> {
    let layers = Builder::new(norm)
        .then("conv1", conv(16, 5, 2))
        .then("relu1", LayerKind::Relu)
        .then("pool1", pool())
        .then("conv2", conv(32, 5, 2))
        .then("relu2", LayerKind::Relu)
        .then("pool2", pool())
        .head(classes);
    finish(input_shape, classes, layers)
}

/// Three conv3×3 – ReLU – maxpool blocks, then FC.
pub fn conv_b(
    input_shape: [usize; 3],
    classes: usize,
    norm: &Normalization,
) -> Result<NetworkSpec> {
    let layers = Builder::new(norm)
        .then("conv1", conv(32, 3, 1))
        .then("relu1", LayerKind::Relu)
        .then("pool1", pool())
        .then("conv2", conv(64, 3, 1))
        .then("relu2", LayerKind::Relu)
        .then("pool2", pool())
        .then("conv3", conv(64, 3, 1))
        .then("relu3", LayerKind::Relu)
        .then("pool3", pool())
        .head(classes);
    finish(input_shape, classes, layers)
}

/// A stem convolution followed by one two-branch block joined by Concat.
pub fn branchy(
    input_shape: [usize; 3],
    classes: usize,
    norm: &Normalization,
) -> Result<NetworkSpec> {
    let layers = Builder::new(norm)
        .then("stem", conv(16, 3, 1))
        .then("stem_relu", LayerKind::Relu)
        .then("stem_pool", pool())
        .push("b1_conv", conv(8, 1, 0), &["stem_pool"])
        .then("b1_relu", LayerKind::Relu)
        .push("b2_conv", conv(8, 3, 1), &["stem_pool"])
        .then("b2_relu", LayerKind::Relu)
        .push("concat", LayerKind::Concat, &["b1_relu", "b2_relu"])
        .then("block_pool", pool())
        .head(classes);
    finish(input_shape, classes, layers)
}

fn finish(
    input_shape: [usize; 3],
    class_count: usize,
    layers: Vec<LayerSpec>,
) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        input_shape,
        class_count,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Looks a preset up by name (`convA`, `convB`, `branchy`).
pub fn by_name(
    name: &str,
    input_shape: [usize; 3],
    classes: usize,
    norm: &Normalization,
) -> Result<NetworkSpec> {
    match name {
        "convA" => conv_a(input_shape, classes, norm),
        "convB" => conv_b(input_shape, classes, norm),
        "branchy" => branchy(input_shape, classes, norm),
        other => Err(Error::InvalidArgument(format!(
            "unknown architecture {other:?}; expected one of {NAMES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::infer_shapes;

    #[test]
    fn presets_fit_mnist_and_cifar() {
        for name in NAMES {
            for (shape, c) in [([1, 28, 28], 1), ([3, 32, 32], 3)] {
                let spec = by_name(name, shape, 10, &Normalization::identity(c)).unwrap();
                assert_eq!(infer_shapes(&spec).unwrap()["prob"], vec![10]);
            }
        }
        let shapes =
            infer_shapes(&conv_a([1, 28, 28], 10, &Normalization::identity(1)).unwrap()).unwrap();
        assert_eq!(shapes["pool2"], vec![32, 7, 7]);
        let shapes =
            infer_shapes(&branchy([1, 28, 28], 10, &Normalization::identity(1)).unwrap()).unwrap();
        assert_eq!(shapes["concat"], vec![16, 14, 14]);
    }

    #[test]
    fn unknown_name() {
        assert!(by_name("vgg", [1, 28, 28], 10, &Normalization::identity(1)).is_err());
    }
}
