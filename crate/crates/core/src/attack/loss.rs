use crate::attack::LayerSelection;
use crate::error::{Error, Result};
use crate::nn::{Model, Seed};
use crate::numerics::Tensor;

/// Value, gradient and per-layer means of the activation loss at δ.
#[derive(Debug, Clone)]
pub struct FffLoss {
    pub value: f64,
    /// Gradient with respect to δ, shaped `[C, H, W]`.
    pub grad: Tensor,
    /// Mean activation of each selected layer, in selection order.
    pub means: Vec<f64>,
}

/// `−Σᵢ ln(l̄ᵢ(δ) + eps_floor)`, where `l̄ᵢ` is the mean over every element
/// of selected layer `i` when δ alone is fed to the network.
pub fn fff_loss(
    model: &Model,
    delta: &Tensor,
    sel: &LayerSelection,
    eps_floor: f64,
) -> Result<FffLoss> {
    let [c, h, w] = model.input_shape();
    if delta.shape() != [c, h, w] {
        return Err(Error::Shape(format!(
            "δ {:?} does not match input [{c}, {h}, {w}]",
            delta.shape()
        )));
    }
    if sel.indices.iter().any(|&i| i >= model.spec().layers.len()) {
        return Err(Error::InvalidArgument(
            "selection does not belong to this model".into(),
        ));
    }
    let x = delta.clone().reshape(&[1, c, h, w])?;
    let trace = model.forward(&x)?;
    let mut value = 0.0;
    let mut means = Vec::with_capacity(sel.indices.len());
    let mut seeds = Vec::with_capacity(sel.indices.len());
    for &i in &sel.indices {
        let out = trace.output(i);
        let mean = out.mean();
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!(
                "mean activation of {:?}",
                model.spec().layers[i].id
            )));
        }
        let shifted = mean + eps_floor;
        value -= shifted.ln();
        means.push(mean);
        seeds.push(Seed {
            layer: i,
            grad: Tensor::full(out.shape(), -1.0 / (shifted * out.len() as f64)),
        });
    }
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("activation loss {value}")));
    }
    let grads = model.backward(&trace, seeds, true, false)?;
    let grad = grads.input.reshape(&[c, h, w])?;
    if !grad.all_finite() {
        return Err(Error::NonFinite("activation loss gradient".into()));
    }
    Ok(FffLoss { value, grad, means })
}
