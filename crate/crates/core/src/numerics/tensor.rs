use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Dense row-major array of `f64`. Image batches use N,C,H,W order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("shape has no axes".into()));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::Shape(format!(
            "axis {axis} of {shape:?} has zero extent"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Shape(format!("{shape:?} overflows")))
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i} is {}", data[i])));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor. Panics on a zero extent.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = element_count(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = element_count(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Number of items along the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per item along the leading axis.
    pub fn item_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let k = self.item_len();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.item_len();
        &mut self.data[i * k..(i + 1) * k]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

/// Uniform samples in `[lo, hi]`, drawn in row-major order from `rng`.
pub fn uniform_init(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "uniform bounds must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    let n = element_count(shape)?;
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Clamps every element into `[lo, hi]`.
pub fn clip_inplace(t: &mut Tensor, lo: f64, hi: f64) {
    debug_assert!(lo <= hi);
    for v in t.data_mut() {
        *v = v.max(lo).min(hi);
    }
}

/// Largest absolute value. Errors on an empty slice.
pub fn linf_norm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("ℓ∞ norm of an empty tensor".into()));
    }
    Ok(values.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Multiplies every element by `factor`, which must lie in (0, 1).
pub fn rescale(t: &mut Tensor, factor: f64) -> Result<()> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rescale factor must lie in (0, 1), got {factor}"
        )));
    }
    t.scale(factor);
    Ok(())
}
