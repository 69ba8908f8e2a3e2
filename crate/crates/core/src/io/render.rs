use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::perturbation::Perturbation;

/// Maps `[-ξ, +ξ]` onto `[0, 255]`, rounding half away from zero, so 0 maps
/// to 128.
pub fn affine_pixel(v: f64, xi: f64) -> u8 {
    ((v + xi) / (2.0 * xi) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes δ as an 8-bit grayscale (C = 1) or RGB (C = 3) PNG.
pub fn render_perturbation(p: &Perturbation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [c, h, w] = p.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "cannot render {c} channels; expected 1 or 3"
            )))
        }
    };
    let plane = h * w;
    let d = p.delta().data();
    let mut pixels = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            pixels.push(affine_pixel(d[ch * plane + i], p.xi()));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
