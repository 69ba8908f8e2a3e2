//! Per-sample numeric kernels. Every function works on one sample so batch
//! composition never changes a sample's result.

pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn pool_out_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    conv_out_extent(input, window, stride, 0)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the input into a `(C·kh·kw) × (out_h·out_w)` matrix.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back, accumulating into `dx`.
fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the given slices;
    // callers pass dense row-major (or transposed) views of exactly m·k, k·n
    // and m·n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
    col: &mut Vec<f64>,
) {
    let (k, p) = (g.patch_len(), g.positions());
    col.resize(k * p, 0.0);
    im2col(g, x, col);
    for (o, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[o]);
    }
    gemm(
        g.out_c,
        k,
        p,
        weight,
        (k as isize, 1),
        col,
        (p as isize, 1),
        1.0,
        out,
    );
}

/// Accumulates `dx` (if given) and `dweight`/`dbias` (if given).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dparams: Option<(&mut [f64], &mut [f64])>,
    col: &mut Vec<f64>,
) {
    let (k, p) = (g.patch_len(), g.positions());
    col.resize(k * p, 0.0);
    if let Some((dw, db)) = dparams {
        im2col(g, x, col);
        // dW (out_c × k) += dout (out_c × p) · colᵀ (p × k)
        gemm(
            g.out_c,
            p,
            k,
            dout,
            (p as isize, 1),
            col,
            (1, p as isize),
            1.0,
            dw,
        );
        for (o, row) in dout.chunks_exact(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        // dcol (k × p) = Wᵀ (k × out_c) · dout (out_c × p)
        gemm(
            k,
            g.out_c,
            p,
            weight,
            (1, k as isize),
            dout,
            (p as isize, 1),
            0.0,
            col,
        );
        col2im(g, col, dx);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub window: usize,
    pub stride: usize,
}

/// Max pooling; `argmax` receives the flat input index chosen per output,
/// the first maximum in row-major window order.
pub(crate) fn max_pool_forward(g: &PoolGeom, x: &[f64], out: &mut [f64], argmax: &mut [usize]) {
    for c in 0..g.c {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for wy in 0..g.window {
                    for wx in 0..g.window {
                        let idx = (c * g.in_h + oy * g.stride + wy) * g.in_w + ox * g.stride + wx;
                        if x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                let o = (c * g.out_h + oy) * g.out_w + ox;
                out[o] = best;
                argmax[o] = at;
            }
        }
    }
}

pub(crate) fn avg_pool_forward(g: &PoolGeom, x: &[f64], out: &mut [f64]) {
    let inv = 1.0 / (g.window * g.window) as f64;
    for c in 0..g.c {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut sum = 0.0;
                for wy in 0..g.window {
                    let row = (c * g.in_h + oy * g.stride + wy) * g.in_w + ox * g.stride;
                    sum += x[row..row + g.window].iter().sum::<f64>();
                }
                out[(c * g.out_h + oy) * g.out_w + ox] = sum * inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, dout: &[f64], dx: &mut [f64]) {
    let inv = 1.0 / (g.window * g.window) as f64;
    for c in 0..g.c {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = dout[(c * g.out_h + oy) * g.out_w + ox] * inv;
                for wy in 0..g.window {
                    let row = (c * g.in_h + oy * g.stride + wy) * g.in_w + ox * g.stride;
                    for v in &mut dx[row..row + g.window] {
                        *v += d;
                    }
                }
            }
        }
    }
}

pub(crate) fn dense_forward(x: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        *y = bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

pub(crate) fn dense_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dparams: Option<(&mut [f64], &mut [f64])>,
) {
    let n_in = x.len();
    if let Some(dx) = dx {
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (g, w) in dx.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                *g += w * d;
            }
        }
    }
    if let Some((dw, db)) = dparams {
        for (o, &d) in dout.iter().enumerate() {
            db[o] += d;
            for (g, v) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *g += d * v;
            }
        }
    }
}

/// Numerically stable softmax of one logit vector.
pub(crate) fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(conv_out_extent(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_extent(28, 5, 1, 0), Some(24));
        assert_eq!(conv_out_extent(7, 3, 2, 0), Some(3));
        assert_eq!(conv_out_extent(3, 5, 1, 0), None);
        assert_eq!(pool_out_extent(8, 2, 2), Some(4));
        assert_eq!(pool_out_extent(7, 2, 2), Some(3));
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let g = PoolGeom {
            c: 1,
            in_h: 2,
            in_w: 2,
            out_h: 1,
            out_w: 1,
            window: 2,
            stride: 2,
        };
        let mut out = [0.0];
        let mut arg = [9];
        max_pool_forward(&g, &[1.0, 3.0, 3.0, 2.0], &mut out, &mut arg);
        assert_eq!((out[0], arg[0]), (3.0, 1));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut out = [0.0; 4];
        softmax(&[700.0, 699.0, 650.0, 690.0], &mut out);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.iter().all(|&p| p > 0.0));
    }
}
