//! Image datasets in raw `[0, 255]` pixel space.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`, values in `[0, 255]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside [0, {class_count})"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "pixel values must lie in [0, 255]".into(),
            ));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.item(i)
    }

    /// Stacks the listed images into an `[n, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.images.item_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        Tensor::from_parts(vec![indices.len(), c, h, w], data)
    }

    /// New dataset holding the listed samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty subset".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of {}",
                self.len()
            )));
        }
        Ok(Dataset {
            name: self.name.clone(),
            images: self.batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Per-channel mean and the pooled standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, f64) {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for n in 0..self.len() {
            for (k, &v) in self.image(n).iter().enumerate() {
                sum[k / plane] += v;
                sq[k / plane] += v * v;
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let var = (0..c)
            .map(|k| sq[k] / count - mean[k] * mean[k])
            .sum::<f64>()
            / c as f64;
        (mean, var.max(1e-12).sqrt())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn parse_idx(bytes: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, &[u8]), FormatError> {
    let header = 4 + 4 * dims;
    let found = be_u32(bytes, 0).ok_or(FormatError::Truncated {
        needed: header,
        found: bytes.len(),
    })?;
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: format!("{magic:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    if bytes.len() < header {
        return Err(FormatError::Truncated {
            needed: header,
            found: bytes.len(),
        });
    }
    let extents: Vec<usize> = (0..dims)
        .map(|d| be_u32(bytes, 4 + 4 * d).unwrap() as usize)
        .collect();
    let count = extents.iter().product::<usize>();
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(FormatError::Truncated {
            needed: header + count,
            found: bytes.len(),
        });
    }
    if payload.len() > count {
        return Err(FormatError::Inconsistent(format!(
            "{} trailing bytes after payload",
            payload.len() - count
        )));
    }
    Ok((extents, payload))
}

/// Loads an IDX image file (`0x00000803`, N×H×W unsigned bytes) and its
/// label file (`0x00000801`). The class count is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read(ip)?;
    let label_bytes = read(lp)?;
    let (dims, pixels) =
        parse_idx(&image_bytes, 0x0000_0803, 3).map_err(|e| Error::format(ip, e))?;
    let (ldims, labels) =
        parse_idx(&label_bytes, 0x0000_0801, 1).map_err(|e| Error::format(lp, e))?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n != ldims[0] {
        return Err(Error::format(
            lp,
            FormatError::CountMismatch {
                images: n,
                labels: ldims[0],
            },
        ));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(
            ip,
            FormatError::Inconsistent(format!("empty image set {dims:?}")),
        ));
    }
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let images = Tensor::from_parts(vec![n, 1, h, w], pixels.iter().map(|&b| b as f64).collect());
    let name = ip
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(Dataset {
        name,
        images,
        labels,
        class_count,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads CIFAR-10 binary batches: records of one label byte followed by the
/// R, G and B planes of a 32×32 image.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::InvalidArgument(
            "no CIFAR-10 batch files given".into(),
        ));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                FormatError::Inconsistent(format!(
                    "length {} is not a positive multiple of {CIFAR_RECORD}",
                    bytes.len()
                )),
            ));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label > 9 {
                return Err(Error::format(
                    path,
                    FormatError::LabelRange {
                        label,
                        class_count: 10,
                    },
                ));
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| b as f64));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        name: "cifar10".into(),
        images: Tensor::from_parts(vec![n, 3, 32, 32], pixels),
        labels,
        class_count: 10,
    })
}

/// Standard deviation of the Gaussian blobs drawn by [`synth_dataset`].
pub const SYNTH_BLOB_STD: f64 = 8.0;

/// Separable synthetic data: class `k` is an isotropic Gaussian blob
/// (σ = [`SYNTH_BLOB_STD`]) around a template image, clipped to `[0, 255]`.
/// Templates are redrawn until every pair is at least 6σ apart in ℓ2.
/// Sample `i` belongs to class `i mod class_count`.
pub fn synth_dataset(
    rng: &mut Rng,
    class_count: usize,
    n: usize,
    shape: [usize; 3],
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::InvalidArgument(
            "synthetic data needs at least 2 classes".into(),
        ));
    }
    if n < class_count {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot cover {class_count} classes"
        )));
    }
    let d: usize = shape.iter().product();
    if d == 0 {
        return Err(Error::Shape(format!("zero extent in {shape:?}")));
    }
    let min_gap = 6.0 * SYNTH_BLOB_STD;
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(class_count);
    let mut attempts = 0;
    while templates.len() < class_count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidArgument(format!(
                "cannot place {class_count} separated templates in {d} dimensions"
            )));
        }
        let t: Vec<f64> = (0..d).map(|_| rng.uniform(40.0, 215.0)).collect();
        let far = templates.iter().all(|o| {
            o.iter()
                .zip(&t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= min_gap
        });
        if far {
            templates.push(t);
        }
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % class_count;
        labels.push(k);
        data.extend(
            templates[k]
                .iter()
                .map(|&m| (m + SYNTH_BLOB_STD * rng.normal()).clamp(0.0, 255.0)),
        );
    }
    Ok(Dataset {
        name: "synth".into(),
        images: Tensor::from_parts(vec![n, shape[0], shape[1], shape[2]], data),
        labels,
        class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_rejects_too_few_samples() {
        assert!(synth_dataset(&mut Rng::new(1), 4, 3, [1, 4, 4]).is_err());
        assert!(synth_dataset(&mut Rng::new(1), 1, 3, [1, 4, 4]).is_err());
    }

    #[test]
    fn subset_and_batch() {
        let d = synth_dataset(&mut Rng::new(2), 3, 9, [1, 2, 2]).unwrap();
        let s = d.subset(&[4, 1]).unwrap();
        assert_eq!(s.labels, vec![1, 1]);
        assert_eq!(s.image(0), d.image(4));
        assert!(d.subset(&[]).is_err());
        assert!(d.subset(&[9]).is_err());
    }
}
