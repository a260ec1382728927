//! Pure forward/backward kernels for the network primitives.
//!
//! Everything here operates on plain tensors with no tape involvement; the
//! autodiff layer validates shapes and dispatches to these functions.
//! Convolution goes through im2col plus a GEMM.

use crate::tensor::{Element, Shape, Tensor};

/// Convolution geometry shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when non-positive.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Scatters one sample into im2col layout: rows are `Cin*kh*kw` taps,
/// columns are output positions.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let l = oh * ow;
    debug_assert_eq!(cols.len(), c_in * kh * kw * l);
    let mut row = 0;
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * l..(row + 1) * l];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst_row.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx * geom.dilation) as isize
                            - geom.padding as isize;
                        *v = if ix >= 0 && ix < w as isize {
                            src_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulates column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let l = oh * ow;
    let mut row = 0;
    for c in 0..c_in {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * l..(row + 1) * l];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &g) in src_row.iter().enumerate() {
                        let ix = (ox * geom.stride + kx * geom.dilation) as isize
                            - geom.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeom,
) -> Tensor<T> {
    let s = input.shape();
    let ws = weight.shape();
    let (c_out, c_in, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    debug_assert_eq!(s.c, c_in);
    let oh = geom.out_extent(s.h, kh).expect("validated upstream");
    let ow = geom.out_extent(s.w, kw).expect("validated upstream");
    let l = oh * ow;
    let ckk = c_in * kh * kw;

    let mut out = vec![T::zero(); s.n * c_out * l];
    let mut cols = vec![T::zero(); ckk * l];
    for n in 0..s.n {
        let x = &input.data()[n * c_in * s.h * s.w..(n + 1) * c_in * s.h * s.w];
        im2col(x, c_in, s.h, s.w, kh, kw, geom, oh, ow, &mut cols);
        let dst = &mut out[n * c_out * l..(n + 1) * c_out * l];
        T::gemm(c_out, ckk, l, weight.data(), false, &cols, false, dst);
        for c in 0..c_out {
            let b = bias.data()[c];
            for v in dst[c * l..(c + 1) * l].iter_mut() {
                *v += b;
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, c_out, oh, ow), out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is skipped
/// (zeros) when `need_dx` is false.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let ws = weight.shape();
    let (c_out, c_in, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let os = grad_out.shape();
    let (oh, ow) = (os.h, os.w);
    let l = oh * ow;
    let ckk = c_in * kh * kw;

    let mut dx = vec![T::zero(); input.numel()];
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); c_out];
    let mut cols = vec![T::zero(); ckk * l];
    let mut dw_scratch = vec![T::zero(); weight.numel()];
    let mut dcols = vec![T::zero(); ckk * l];

    for n in 0..s.n {
        let gy = &grad_out.data()[n * c_out * l..(n + 1) * c_out * l];
        let x = &input.data()[n * c_in * s.h * s.w..(n + 1) * c_in * s.h * s.w];
        im2col(x, c_in, s.h, s.w, kh, kw, geom, oh, ow, &mut cols);

        // dW += gy . cols^T
        T::gemm(c_out, l, ckk, gy, false, &cols, true, &mut dw_scratch);
        for (a, b) in dw.iter_mut().zip(dw_scratch.iter()) {
            *a += *b;
        }
        for c in 0..c_out {
            let mut acc = T::zero();
            for &g in &gy[c * l..(c + 1) * l] {
                acc += g;
            }
            db[c] += acc;
        }
        if need_dx {
            // dcols = W^T . gy, then scatter back onto the input
            T::gemm(ckk, c_out, l, weight.data(), true, gy, false, &mut dcols);
            col2im(
                &dcols,
                c_in,
                s.h,
                s.w,
                kh,
                kw,
                geom,
                oh,
                ow,
                &mut dx[n * c_in * s.h * s.w..(n + 1) * c_in * s.h * s.w],
            );
        }
    }
    (
        Tensor::from_vec(s, dx),
        Tensor::from_vec(ws, dw),
        Tensor::from_vec(Shape::new(1, c_out, 1, 1), db),
    )
}

/// 2x2 stride-2 max pooling. Returns the pooled tensor and the flat input
/// index of each window maximum (first occurrence in row-major order).
pub fn maxpool2x2_forward<T: Element>(input: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let s = input.shape();
    debug_assert!(s.h.is_multiple_of(2) && s.w.is_multiple_of(2));
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = vec![T::zero(); s.n * s.c * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    let data = input.data();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = base + (2 * oy) * s.w + 2 * ox;
                    let idxs = [i00, i00 + 1, i00 + s.w, i00 + s.w + 1];
                    let mut best = idxs[0];
                    let mut best_v = data[idxs[0]];
                    for &i in &idxs[1..] {
                        if data[i] > best_v {
                            best_v = data[i];
                            best = i;
                        }
                    }
                    out[o] = best_v;
                    argmax[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    (
        Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out),
        argmax,
    )
}

pub fn maxpool2x2_backward<T: Element>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: Shape,
) -> Tensor<T> {
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (g, &i) in grad_out.data().iter().zip(argmax.iter()) {
        dx[i as usize] += *g;
    }
    Tensor::from_vec(input_shape, dx)
}

/// Per-axis source taps for 2x half-pixel (align-corners-off) interpolation.
fn upsample_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i0 = i0.min(in_len - 1);
            let frac = src - i0 as f64;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, frac)
        })
        .collect()
}

pub fn upsample2x_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (oh, ow) = (s.h * 2, s.w * 2);
    let ys = upsample_taps(oh, s.h);
    let xs = upsample_taps(ow, s.w);
    let mut out = vec![T::zero(); s.n * s.c * oh * ow];
    let data = input.data();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let v00 = data[base + y0 * s.w + x0].to_f64();
                    let v01 = data[base + y0 * s.w + x1].to_f64();
                    let v10 = data[base + y1 * s.w + x0].to_f64();
                    let v11 = data[base + y1 * s.w + x1].to_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    out[o] = T::from_f64(top * (1.0 - fy) + bot * fy);
                    o += 1;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)
}

pub fn upsample2x_backward<T: Element>(grad_out: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let s = input_shape;
    let os = grad_out.shape();
    let ys = upsample_taps(os.h, s.h);
    let xs = upsample_taps(os.w, s.w);
    let mut dx = vec![T::zero(); s.numel()];
    let g = grad_out.data();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let gv = g[o].to_f64();
                    o += 1;
                    dx[base + y0 * s.w + x0] += T::from_f64(gv * (1.0 - fy) * (1.0 - fx));
                    dx[base + y0 * s.w + x1] += T::from_f64(gv * (1.0 - fy) * fx);
                    dx[base + y1 * s.w + x0] += T::from_f64(gv * fy * (1.0 - fx));
                    dx[base + y1 * s.w + x1] += T::from_f64(gv * fy * fx);
                }
            }
        }
    }
    Tensor::from_vec(s, dx)
}

/// Replicates a `(N,C,1,1)` tensor over `h x w`; bilinear resize from a
/// single pixel degenerates to this.
pub fn broadcast_spatial_forward<T: Element>(input: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = input.shape();
    debug_assert!(s.h == 1 && s.w == 1);
    let mut out = vec![T::zero(); s.n * s.c * h * w];
    for (i, &v) in input.data().iter().enumerate() {
        for o in out[i * h * w..(i + 1) * h * w].iter_mut() {
            *o = v;
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, h, w), out)
}

pub fn broadcast_spatial_backward<T: Element>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let mut dx = vec![T::zero(); s.n * s.c];
    for (i, d) in dx.iter_mut().enumerate() {
        let mut acc = T::zero();
        for &g in &grad_out.data()[i * s.h * s.w..(i + 1) * s.h * s.w] {
            acc += g;
        }
        *d = acc;
    }
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), dx)
}

pub fn global_avg_pool_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let area = T::from_f64((s.h * s.w) as f64);
    let mut out = vec![T::zero(); s.n * s.c];
    for (i, d) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for &v in &input.data()[i * s.h * s.w..(i + 1) * s.h * s.w] {
            acc += v;
        }
        *d = acc / area;
    }
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out)
}

pub fn global_avg_pool_backward<T: Element>(grad_out: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let s = input_shape;
    let inv_area = T::from_f64(1.0 / (s.h * s.w) as f64);
    let mut dx = vec![T::zero(); s.numel()];
    for (i, &g) in grad_out.data().iter().enumerate() {
        let v = g * inv_area;
        for d in dx[i * s.h * s.w..(i + 1) * s.h * s.w].iter_mut() {
            *d = v;
        }
    }
    Tensor::from_vec(s, dx)
}

/// Affine map on `(N,Cin,1,1)` inputs: `out = x . W^T + b`.
pub fn dense_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let s = input.shape();
    let ws = weight.shape();
    let (c_out, c_in) = (ws.n, ws.c);
    debug_assert!(s.h == 1 && s.w == 1 && s.c == c_in);
    let mut out = vec![T::zero(); s.n * c_out];
    T::gemm(s.n, c_in, c_out, input.data(), false, weight.data(), true, &mut out);
    for n in 0..s.n {
        for (o, &b) in out[n * c_out..(n + 1) * c_out].iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Tensor::from_vec(Shape::new(s.n, c_out, 1, 1), out)
}

pub fn dense_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let ws = weight.shape();
    let (c_out, c_in) = (ws.n, ws.c);
    let mut dx = vec![T::zero(); s.n * c_in];
    T::gemm(s.n, c_out, c_in, grad_out.data(), false, weight.data(), false, &mut dx);
    let mut dw = vec![T::zero(); c_out * c_in];
    T::gemm(c_out, s.n, c_in, grad_out.data(), true, input.data(), false, &mut dw);
    let mut db = vec![T::zero(); c_out];
    for n in 0..s.n {
        for (d, &g) in db.iter_mut().zip(&grad_out.data()[n * c_out..(n + 1) * c_out]) {
            *d += g;
        }
    }
    (
        Tensor::from_vec(s, dx),
        Tensor::from_vec(ws, dw),
        Tensor::from_vec(Shape::new(1, c_out, 1, 1), db),
    )
}

/// Per-channel statistics saved by the batch-norm forward pass.
pub struct BnSaved<T: Element> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Batch normalization over `(N,H,W)` per channel. In train mode the batch
/// statistics normalize and the running buffers receive an EMA update
/// (`running = momentum * running + (1 - momentum) * batch`, biased variance).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
    train: bool,
    eps: f64,
    momentum: f64,
) -> (Tensor<T>, BnSaved<T>) {
    let s = input.shape();
    let m = (s.n * s.h * s.w) as f64;
    let plane = s.h * s.w;
    let data = input.data();

    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    if train {
        for c in 0..s.c {
            let mut acc = 0.0;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for &v in &data[base..base + plane] {
                    acc += v.to_f64();
                }
            }
            let mu = acc / m;
            let mut vacc = 0.0;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for &v in &data[base..base + plane] {
                    let d = v.to_f64() - mu;
                    vacc += d * d;
                }
            }
            mean[c] = T::from_f64(mu);
            var[c] = T::from_f64(vacc / m);
            let mom = T::from_f64(momentum);
            let inv = T::from_f64(1.0 - momentum);
            running_mean[c] = mom * running_mean[c] + inv * mean[c];
            running_var[c] = mom * running_var[c] + inv * var[c];
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();

    let mut xhat = vec![T::zero(); input.numel()];
    let mut out = vec![T::zero(); input.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let (mu, is) = (mean[c], inv_std[c]);
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            for i in base..base + plane {
                let xh = (data[i] - mu) * is;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    (
        Tensor::from_vec(s, out),
        BnSaved {
            xhat: Tensor::from_vec(s, xhat),
            inv_std,
            train,
        },
    )
}

pub fn batchnorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let plane = s.h * s.w;
    let m = T::from_f64((s.n * plane) as f64);
    let g = grad_out.data();
    let xh = saved.xhat.data();

    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                s1 += g[i];
                s2 += g[i] * xh[i];
            }
        }
        dbeta[c] = s1;
        dgamma[c] = s2;
    }

    let mut dx = vec![T::zero(); grad_out.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let gam = gamma.data()[c];
            let is = saved.inv_std[c];
            if saved.train {
                let mean_g = dbeta[c] / m;
                let mean_gx = dgamma[c] / m;
                for i in base..base + plane {
                    dx[i] = gam * is * (g[i] - mean_g - xh[i] * mean_gx);
                }
            } else {
                for i in base..base + plane {
                    dx[i] = gam * is * g[i];
                }
            }
        }
    }
    (
        Tensor::from_vec(s, dx),
        Tensor::from_vec(Shape::new(1, s.c, 1, 1), dgamma),
        Tensor::from_vec(Shape::new(1, s.c, 1, 1), dbeta),
    )
}

/// Sums gradients over the channel axis down to a single channel, for the
/// `C = 1` broadcast operand.
pub fn reduce_channels_to_one<T: Element>(grad: &Tensor<T>) -> Tensor<T> {
    let s = grad.shape();
    let plane = s.h * s.w;
    let mut out = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let dst = &mut out[n * plane..(n + 1) * plane];
            for (d, &g) in dst.iter_mut().zip(&grad.data()[base..base + plane]) {
                *d += g;
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), out)
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, the reference the GEMM path is
    /// checked against.
    pub fn conv2d_oracle<T: Element>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        geom: ConvGeom,
    ) -> Tensor<T> {
        let s = input.shape();
        let ws = weight.shape();
        let oh = geom.out_extent(s.h, ws.h).unwrap();
        let ow = geom.out_extent(s.w, ws.w).unwrap();
        let mut out = Tensor::zeros(Shape::new(s.n, ws.n, oh, ow));
        let os = out.shape();
        let buf = out.data_mut();
        for n in 0..s.n {
            for co in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co].to_f64();
                        for ci in 0..ws.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * geom.stride + ky * geom.dilation) as isize
                                        - geom.padding as isize;
                                    let ix = (ox * geom.stride + kx * geom.dilation) as isize
                                        - geom.padding as isize;
                                    if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize
                                    {
                                        acc += input.at(n, ci, iy as usize, ix as usize).to_f64()
                                            * weight.at(co, ci, ky, kx).to_f64();
                                    }
                                }
                            }
                        }
                        buf[os.index(n, co, oy, ox)] = T::from_f64(acc);
                    }
                }
            }
        }
        out
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv_all_ones_3x3_padded() {
        let input = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let weight = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let bias = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let geom = ConvGeom { stride: 1, padding: 1, dilation: 1 };
        let out = conv2d_forward(&input, &weight, &bias, geom);
        assert_eq!(out.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 2, 2), 4.0);
        assert_eq!(out.at(0, 0, 0, 2), 4.0);
        let oracle = conv2d_oracle(&input, &weight, &bias, geom);
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn conv_identity_1x1_kernel() {
        let mut r = rng(1);
        let input = Tensor::<f64>::rand_uniform(Shape::new(2, 3, 5, 4), -1.0, 1.0, &mut r);
        let mut weight = Tensor::<f64>::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            let idx = weight.shape().index(c, c, 0, 0);
            weight.data_mut()[idx] = 1.0;
        }
        let bias = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        let out = conv2d_forward(&input, &weight, &bias, ConvGeom { stride: 1, padding: 0, dilation: 1 });
        assert!(out.max_abs_diff(&input) < 1e-15);
    }

    #[test]
    fn conv_dilated_matches_oracle() {
        let mut r = rng(2);
        let input = Tensor::<f64>::rand_uniform(Shape::new(1, 1, 5, 5), -1.0, 1.0, &mut r);
        let weight = Tensor::<f64>::rand_uniform(Shape::new(1, 1, 3, 3), -1.0, 1.0, &mut r);
        let bias = Tensor::<f64>::rand_uniform(Shape::new(1, 1, 1, 1), -1.0, 1.0, &mut r);
        let geom = ConvGeom { stride: 1, padding: 2, dilation: 2 };
        let out = conv2d_forward(&input, &weight, &bias, geom);
        assert_eq!(out.shape(), Shape::new(1, 1, 5, 5));
        let oracle = conv2d_oracle(&input, &weight, &bias, geom);
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn conv_random_shapes_match_oracle() {
        for seed in 0..8 {
            let mut r = rng(seed + 100);
            let (n, ci, co) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
            let (h, w) = (r.gen_range(4..9), r.gen_range(4..9));
            let k = [1, 3][r.gen_range(0..2)];
            let stride = r.gen_range(1..3);
            let dilation = if k == 3 { r.gen_range(1..3) } else { 1 };
            let padding = r.gen_range(0..3);
            let geom = ConvGeom { stride, padding, dilation };
            if geom.out_extent(h, k).is_none() || geom.out_extent(w, k).is_none() {
                continue;
            }
            let input = Tensor::<f64>::rand_uniform(Shape::new(n, ci, h, w), -1.0, 1.0, &mut r);
            let weight = Tensor::<f64>::rand_uniform(Shape::new(co, ci, k, k), -1.0, 1.0, &mut r);
            let bias = Tensor::<f64>::rand_uniform(Shape::new(1, co, 1, 1), -1.0, 1.0, &mut r);
            let out = conv2d_forward(&input, &weight, &bias, geom);
            let oracle = conv2d_oracle(&input, &weight, &bias, geom);
            assert!(out.max_abs_diff(&oracle) < 1e-11, "seed {seed}");
        }
    }

    #[test]
    fn conv_linearity_in_input() {
        let mut r = rng(5);
        let input = Tensor::<f64>::rand_uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut r);
        let weight = Tensor::<f64>::rand_uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut r);
        let bias = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        let geom = ConvGeom { stride: 1, padding: 1, dilation: 1 };
        let a = 2.75;
        let out_scaled = conv2d_forward(&input.map(|v| v * a), &weight, &bias, geom);
        let scaled_out = conv2d_forward(&input, &weight, &bias, geom).map(|v| v * a);
        let denom: f64 = scaled_out.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(out_scaled.max_abs_diff(&scaled_out) / denom < 1e-6);
    }

    #[test]
    fn maxpool_basics_and_oracle() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let (out, argmax) = maxpool2x2_forward(&t);
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);

        let c = Tensor::<f32>::full(Shape::new(2, 3, 4, 4), 0.25);
        let (out, _) = maxpool2x2_forward(&c);
        assert_eq!(out.shape(), Shape::new(2, 3, 2, 2));
        assert!(out.iter().all(|&v| v == 0.25));

        // window-scan oracle on a random input
        let mut r = rng(9);
        let t = Tensor::<f32>::rand_uniform(Shape::new(1, 2, 8, 8), -1.0, 1.0, &mut r);
        let (out, _) = maxpool2x2_forward(&t);
        for c in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let m = t
                        .at(0, c, 2 * oy, 2 * ox)
                        .max(t.at(0, c, 2 * oy, 2 * ox + 1))
                        .max(t.at(0, c, 2 * oy + 1, 2 * ox))
                        .max(t.at(0, c, 2 * oy + 1, 2 * ox + 1));
                    assert_eq!(out.at(0, c, oy, ox), m);
                }
            }
        }
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![7.0, 7.0, 7.0, 7.0]);
        let (_, argmax) = maxpool2x2_forward(&t);
        assert_eq!(argmax, vec![0]);
        let g = Tensor::<f32>::scalar(1.0);
        let dx = maxpool2x2_backward(&g, &argmax, t.shape());
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let c = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 1.25);
        let out = upsample2x_forward(&c);
        assert_eq!(out.shape(), Shape::new(1, 2, 6, 6));
        assert!(out.iter().all(|&v| (v - 1.25).abs() < 1e-12));

        let p = Tensor::<f64>::scalar(3.5);
        let out = upsample2x_forward(&p);
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2));
        assert!(out.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn upsample_2x2_matches_pointwise_formula() {
        let t = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]);
        let out = upsample2x_forward(&t);
        // scalar half-pixel interpolation oracle per output pixel
        let sample = |o: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(1);
            (i0, (i0 + 1).min(1), src - i0 as f64)
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let (y0, y1, fy) = sample(oy);
                let (x0, x1, fx) = sample(ox);
                let top = t.at(0, 0, y0, x0) * (1.0 - fx) + t.at(0, 0, y0, x1) * fx;
                let bot = t.at(0, 0, y1, x0) * (1.0 - fx) + t.at(0, 0, y1, x1) * fx;
                let expect = top * (1.0 - fy) + bot * fy;
                assert!((out.at(0, 0, oy, ox) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gap_is_mean() {
        let t = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let out = global_avg_pool_forward(&t);
        assert_eq!(out.data(), &[2.5]);

        let c = Tensor::<f64>::full(Shape::new(2, 3, 5, 5), -0.5);
        assert!(global_avg_pool_forward(&c).iter().all(|&v| v == -0.5));

        let mut r = rng(11);
        let t = Tensor::<f64>::rand_uniform(Shape::new(2, 3, 4, 6), -1.0, 1.0, &mut r);
        let out = global_avg_pool_forward(&t);
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for y in 0..4 {
                    for x in 0..6 {
                        s += t.at(n, c, y, x);
                    }
                }
                assert!((out.at(n, c, 0, 0) - s / 24.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dense_matches_matvec_oracle() {
        // identity weight
        let mut w = Tensor::<f64>::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            let i = w.shape().index(c, c, 0, 0);
            w.data_mut()[i] = 1.0;
        }
        let b = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        let mut r = rng(12);
        let x = Tensor::<f64>::rand_uniform(Shape::new(2, 3, 1, 1), -1.0, 1.0, &mut r);
        assert!(dense_forward(&x, &w, &b).max_abs_diff(&x) < 1e-15);

        // [[1,1]] . [2,3] + [1] = [6]
        let w = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 1.0]);
        let b = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]);
        let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), vec![2.0, 3.0]);
        assert_eq!(dense_forward(&x, &w, &b).data(), &[6.0]);

        // random case against a triple loop
        let w = Tensor::<f64>::rand_uniform(Shape::new(4, 5, 1, 1), -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(Shape::new(1, 4, 1, 1), -1.0, 1.0, &mut r);
        let x = Tensor::<f64>::rand_uniform(Shape::new(3, 5, 1, 1), -1.0, 1.0, &mut r);
        let out = dense_forward(&x, &w, &b);
        for n in 0..3 {
            for co in 0..4 {
                let mut acc = b.at(0, co, 0, 0);
                for ci in 0..5 {
                    acc += w.at(co, ci, 0, 0) * x.at(n, ci, 0, 0);
                }
                assert!((out.at(n, co, 0, 0) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 3, 3), 4.2);
        let gamma = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 1.0);
        let beta = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (out, _) =
            batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, true, 1e-5, 0.9);
        assert!(out.iter().all(|&v| v.abs() < 1e-12));
        // running stats moved toward the batch
        assert!((rm[0] - 0.42).abs() < 1e-12);
        assert!((rv[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_to_unit_stats() {
        let mut r = rng(13);
        let x = Tensor::<f64>::rand_uniform(Shape::new(2, 3, 4, 4), -2.0, 3.0, &mut r);
        let gamma = Tensor::<f64>::full(Shape::new(1, 3, 1, 1), 1.0);
        let beta = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let (out, _) =
            batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, true, 1e-5, 0.9);
        let m = 32.0;
        for c in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..2 {
                for y in 0..4 {
                    for xx in 0..4 {
                        mean += out.at(n, c, y, xx);
                    }
                }
            }
            mean /= m;
            for n in 0..2 {
                for y in 0..4 {
                    for xx in 0..4 {
                        var += (out.at(n, c, y, xx) - mean).powi(2);
                    }
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_two_element_channel() {
        let x = Tensor::<f64>::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 3.0]);
        let gamma = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 1.0);
        let beta = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (out, _) =
            batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, true, 1e-5, 0.9);
        // mean 2, var 1 -> +/- 1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.data()[0] + expect).abs() < 1e-12);
        assert!((out.data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((sigmoid_scalar(50.0f64) - 1.0).abs() < 1e-6);
        assert!(sigmoid_scalar(-50.0f64) < 1e-6);
        assert!(sigmoid_scalar(-50.0f64) > 0.0);
        assert!(sigmoid_scalar(800.0f64).is_finite());
        assert!(sigmoid_scalar(-800.0f64).is_finite());
    }
}
