//! Layer primitives with analytic forward/backward passes.
//!
//! Convolution weights use `[ky][kx][in_c][out_c]` layout so the innermost
//! loops run over the contiguous out-channel axis.

use crate::scalar::{sc, Scalar};
use crate::tensor::{LabelMask, Tensor};

/// Output spatial size of a padded strided convolution.
#[inline]
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// 2-D convolution, padding `kernel/2`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &[T],
    bias: &[T],
    out_c: usize,
    kernel: usize,
    stride: usize,
) -> Tensor<T> {
    let in_c = x.c;
    let pad = kernel / 2;
    debug_assert_eq!(weights.len(), kernel * kernel * in_c * out_c);
    debug_assert_eq!(bias.len(), out_c);
    let oh = conv_out_dim(x.h, kernel, stride, pad);
    let ow = conv_out_dim(x.w, kernel, stride, pad);
    let mut out = Tensor::zeros(oh, ow, out_c);

    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - pad as isize;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - pad as isize;
            let base = (oy * ow + ox) * out_c;
            let out_px = &mut out.data[base..base + out_c];
            out_px.copy_from_slice(bias);
            for ky in 0..kernel {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                let row = iy as usize * x.w;
                for kx in 0..kernel {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= x.w as isize {
                        continue;
                    }
                    let xb = (row + ix as usize) * in_c;
                    let xpix = &x.data[xb..xb + in_c];
                    let wb = ((ky * kernel + kx) * in_c) * out_c;
                    for (ci, &xv) in xpix.iter().enumerate() {
                        let wrow = &weights[wb + ci * out_c..wb + (ci + 1) * out_c];
                        for (o, &wv) in wrow.iter().enumerate() {
                            out_px[o] += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv2d_forward`].
///
/// Accumulates into `dw`/`db` (and `dx` when given) so a caller can fold
/// several items into one gradient buffer. `dx` may be omitted for the first
/// layer.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &[T],
    dout: &Tensor<T>,
    out_c: usize,
    kernel: usize,
    stride: usize,
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut Tensor<T>>,
) {
    let in_c = x.c;
    let pad = kernel / 2;
    debug_assert_eq!(dout.c, out_c);
    for oy in 0..dout.h {
        let iy0 = (oy * stride) as isize - pad as isize;
        for ox in 0..dout.w {
            let ix0 = (ox * stride) as isize - pad as isize;
            let dbase = (oy * dout.w + ox) * out_c;
            let dpx = &dout.data[dbase..dbase + out_c];
            for (o, &dv) in dpx.iter().enumerate() {
                db[o] += dv;
            }
            for ky in 0..kernel {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                let row = iy as usize * x.w;
                for kx in 0..kernel {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= x.w as isize {
                        continue;
                    }
                    let xb = (row + ix as usize) * in_c;
                    let wb = ((ky * kernel + kx) * in_c) * out_c;
                    for ci in 0..in_c {
                        let xv = x.data[xb + ci];
                        let dwrow = &mut dw[wb + ci * out_c..wb + (ci + 1) * out_c];
                        for (o, &dv) in dpx.iter().enumerate() {
                            dwrow[o] += xv * dv;
                        }
                    }
                    if let Some(dxt) = dx.as_deref_mut() {
                        for ci in 0..in_c {
                            let wrow = &weights[wb + ci * out_c..wb + (ci + 1) * out_c];
                            let mut acc = T::zero();
                            for (o, &dv) in dpx.iter().enumerate() {
                                acc += wrow[o] * dv;
                            }
                            dxt.data[xb + ci] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_forward<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Backward through ReLU given the post-activation output.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, dout: &mut Tensor<T>) {
    for (d, &o) in dout.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Sampling position for resizing `input` points to `output` points
/// (half-pixel-center convention), clamped to the valid range.
#[inline]
fn src_coord(dst: usize, scale: f64) -> f64 {
    ((dst as f64 + 0.5) * scale - 0.5).max(0.0)
}

/// Bilinear resample to an arbitrary target size.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(oh, ow, x.c);
    let sy = x.h as f64 / oh as f64;
    let sx = x.w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = src_coord(oy, sy);
        let y0 = (fy as usize).min(x.h - 1);
        let y1 = (y0 + 1).min(x.h - 1);
        let wy: T = sc(fy - y0 as f64);
        for ox in 0..ow {
            let fx = src_coord(ox, sx);
            let x0 = (fx as usize).min(x.w - 1);
            let x1 = (x0 + 1).min(x.w - 1);
            let wx: T = sc(fx - x0 as f64);
            let p00 = x.pixel(y0, x0);
            let p01 = x.pixel(y0, x1);
            let p10 = x.pixel(y1, x0);
            let p11 = x.pixel(y1, x1);
            let one = T::one();
            let w00 = (one - wy) * (one - wx);
            let w01 = (one - wy) * wx;
            let w10 = wy * (one - wx);
            let w11 = wy * wx;
            let ob = (oy * ow + ox) * x.c;
            let opx = &mut out.data[ob..ob + x.c];
            for ci in 0..x.c {
                opx[ci] = w00 * p00[ci] + w01 * p01[ci] + w10 * p10[ci] + w11 * p11[ci];
            }
        }
    }
    out
}

/// Transpose of [`bilinear_resize`]: scatter output-gradient mass back onto
/// the input grid with the same interpolation weights.
pub fn bilinear_resize_backward<T: Scalar>(dout: &Tensor<T>, ih: usize, iw: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(ih, iw, dout.c);
    let sy = ih as f64 / dout.h as f64;
    let sx = iw as f64 / dout.w as f64;
    for oy in 0..dout.h {
        let fy = src_coord(oy, sy);
        let y0 = (fy as usize).min(ih - 1);
        let y1 = (y0 + 1).min(ih - 1);
        let wy: T = sc(fy - y0 as f64);
        for ox in 0..dout.w {
            let fx = src_coord(ox, sx);
            let x0 = (fx as usize).min(iw - 1);
            let x1 = (x0 + 1).min(iw - 1);
            let wx: T = sc(fx - x0 as f64);
            let one = T::one();
            let w00 = (one - wy) * (one - wx);
            let w01 = (one - wy) * wx;
            let w10 = wy * (one - wx);
            let w11 = wy * wx;
            let db = (oy * dout.w + ox) * dout.c;
            for ci in 0..dout.c {
                let d = dout.data[db + ci];
                dx.data[(y0 * iw + x0) * dout.c + ci] += w00 * d;
                dx.data[(y0 * iw + x1) * dout.c + ci] += w01 * d;
                dx.data[(y1 * iw + x0) * dout.c + ci] += w10 * d;
                dx.data[(y1 * iw + x1) * dout.c + ci] += w11 * d;
            }
        }
    }
    dx
}

/// Nearest-neighbour index map for one axis.
#[inline]
fn nearest_src(dst: usize, scale: f64, limit: usize) -> usize {
    (((dst as f64 + 0.5) * scale) as usize).min(limit - 1)
}

/// Nearest-neighbour resample of a label mask.
pub fn nearest_resize_mask(mask: &LabelMask, oh: usize, ow: usize) -> LabelMask {
    let sy = mask.h as f64 / oh as f64;
    let sx = mask.w as f64 / ow as f64;
    let mut out = LabelMask::filled(oh, ow, 0);
    for oy in 0..oh {
        let iy = nearest_src(oy, sy, mask.h);
        for ox in 0..ow {
            let ix = nearest_src(ox, sx, mask.w);
            out.set(oy, ox, mask.at(iy, ix));
        }
    }
    out
}

/// Nearest-neighbour resample of a multi-channel tensor; used where
/// interpolation would blend values that must stay categorical.
pub fn nearest_resize_hwc<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let sy = x.h as f64 / oh as f64;
    let sx = x.w as f64 / ow as f64;
    let mut out = Tensor::zeros(oh, ow, x.c);
    for oy in 0..oh {
        let iy = nearest_src(oy, sy, x.h);
        for ox in 0..ow {
            let ix = nearest_src(ox, sx, x.w);
            out.pixel_mut(oy, ox).copy_from_slice(x.pixel(iy, ix));
        }
    }
    out
}

/// Nearest-neighbour resample of a per-pixel scalar map.
pub fn nearest_resize_map<T: Scalar>(map: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = vec![T::zero(); oh * ow];
    for oy in 0..oh {
        let iy = nearest_src(oy, sy, h);
        for ox in 0..ow {
            let ix = nearest_src(ox, sx, w);
            out[oy * ow + ox] = map[iy * w + ix];
        }
    }
    out
}

/// Pixel-wise softmax over the channel axis.
pub fn softmax_hwc<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    softmax_hwc_inplace(&mut out);
    out
}

pub fn softmax_hwc_inplace<T: Scalar>(t: &mut Tensor<T>) {
    let c = t.c;
    for px in t.data.chunks_exact_mut(c) {
        let mut m = px[0];
        for &v in px.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in px.iter_mut() {
            *v *= inv;
        }
    }
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_channel<T: Scalar>(t: &Tensor<T>) -> LabelMask {
    let mut mask = LabelMask::filled(t.h, t.w, 0);
    for (i, px) in t.data.chunks_exact(t.c).enumerate() {
        let mut best = 0usize;
        let mut bv = px[0];
        for (ci, &v) in px.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                best = ci;
            }
        }
        mask.classes[i] = best as u8;
    }
    mask
}

pub const BN_EPS: f64 = 1e-5;

/// Cache produced by the training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Spatial batch normalization over one sample: statistics per channel across
/// H x W. Training mode normalizes with the sample's own statistics.
pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BnCache<T>) {
    let c = x.c;
    let n = sc::<T>((x.h * x.w) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for px in x.data.chunks_exact(c) {
        for (ci, &v) in px.iter().enumerate() {
            mean[ci] += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for px in x.data.chunks_exact(c) {
        for (ci, &v) in px.iter().enumerate() {
            let d = v - mean[ci];
            var[ci] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + sc(BN_EPS)).sqrt()).collect();
    let mut xhat = x.clone();
    for px in xhat.data.chunks_exact_mut(c) {
        for (ci, v) in px.iter_mut().enumerate() {
            *v = (*v - mean[ci]) * inv_std[ci];
        }
    }
    let mut out = xhat.clone();
    for px in out.data.chunks_exact_mut(c) {
        for (ci, v) in px.iter_mut().enumerate() {
            *v = gamma[ci] * *v + beta[ci];
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Inference-mode batch norm using running statistics.
pub fn batchnorm_forward_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let c = x.c;
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::one() / (v + sc(BN_EPS)).sqrt())
        .collect();
    let mut out = x.clone();
    for px in out.data.chunks_exact_mut(c) {
        for (ci, v) in px.iter_mut().enumerate() {
            *v = gamma[ci] * (*v - running_mean[ci]) * inv_std[ci] + beta[ci];
        }
    }
    out
}

/// Backward through training-mode batch norm. Accumulates into `dgamma`/`dbeta`
/// and returns the input gradient.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    dout: &Tensor<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let c = dout.c;
    let n = sc::<T>((dout.h * dout.w) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for (dpx, xpx) in dout.data.chunks_exact(c).zip(cache.xhat.data.chunks_exact(c)) {
        for ci in 0..c {
            sum_dy[ci] += dpx[ci];
            sum_dy_xhat[ci] += dpx[ci] * xpx[ci];
        }
    }
    for ci in 0..c {
        dbeta[ci] += sum_dy[ci];
        dgamma[ci] += sum_dy_xhat[ci];
    }
    let mut dx = Tensor::zeros(dout.h, dout.w, c);
    for ((dxpx, dpx), xpx) in dx
        .data
        .chunks_exact_mut(c)
        .zip(dout.data.chunks_exact(c))
        .zip(cache.xhat.data.chunks_exact(c))
    {
        for ci in 0..c {
            let t = n * dpx[ci] - sum_dy[ci] - xpx[ci] * sum_dy_xhat[ci];
            dxpx[ci] = gamma[ci] * cache.inv_std[ci] / n * t;
        }
    }
    dx
}
