//! Forward and backward kernels used by the autodiff graph.
//!
//! Convolutions unfold patches (im2col) and hand the product to a blocked
//! GEMM.

use crate::tensor::{Scalar, Shape, Tensor};

/// Range of output indices `i` for which `i + shift` stays inside `[0, len)`.
#[inline]
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    acc.iter().fold(s, |t, &v| t + v)
}

/// Unfolds one image `(c, h, w)` into a `(c·k·k, h·w)` patch matrix with
/// zero padding.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let p = h * w;
    for ch in 0..c {
        let plane = &img[ch * p..(ch + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let row = &mut cols[((ch * k + ky) * k + kx) * p..][..p];
                let (y0, y1) = valid_range(h, dy);
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    row.fill(T::zero());
                    continue;
                }
                row[..y0 * w].fill(T::zero());
                row[y1 * w..].fill(T::zero());
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let r = &mut row[y * w..(y + 1) * w];
                    r[..x0].fill(T::zero());
                    r[x1..].fill(T::zero());
                    r[x0..x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let p = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * p..(ch + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let row = &cols[((ch * k + ky) * k + kx) * p..][..p];
                let (y0, y1) = valid_range(h, dy);
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution. `weight` has shape `(out, in, k, k)`
/// with odd `k`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(ws.c, xs.c, "conv input channels {} vs weight {}", xs.c, ws.c);
    assert_eq!(ws.h, ws.w);
    let k = ws.h;
    let co = ws.n;
    let p = xs.plane();
    let kk = xs.c * k * k;
    let mut out = Tensor::zeros(xs.with_channels(co));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * p] };
    for n in 0..xs.n {
        let img = &x.data()[n * xs.c * p..(n + 1) * xs.c * p];
        let patches: &[T] = if k == 1 {
            img
        } else {
            im2col(img, xs.c, xs.h, xs.w, k, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[n * co * p..(n + 1) * co * p];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        T::gemm(co, kk, p, weight.data(), (kk, 1), patches, (p, 1), T::one(), dst, (p, 1));
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let ws = weight.shape();
    let k = ws.h;
    let co = ws.n;
    let p = xs.plane();
    let kk = xs.c * k * k;

    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(co, 1, 1, 1));
    let mut gi = need_input.then(|| Tensor::zeros(xs));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut gcols = if need_input && k > 1 { vec![T::zero(); kk * p] } else { Vec::new() };
    for n in 0..xs.n {
        let img = &x.data()[n * xs.c * p..(n + 1) * xs.c * p];
        let g = &grad_out.data()[n * co * p..(n + 1) * co * p];
        let patches: &[T] = if k == 1 {
            img
        } else {
            im2col(img, xs.c, xs.h, xs.w, k, &mut cols);
            &cols
        };
        // gW += G · patchesᵀ
        T::gemm(co, p, kk, g, (p, 1), patches, (1, p), T::one(), gw.data_mut(), (kk, 1));
        for (o, chunk) in g.chunks_exact(p).enumerate() {
            gb.data_mut()[o] += chunk.iter().copied().sum::<T>();
        }
        if let Some(gi) = gi.as_mut() {
            let dst = &mut gi.data_mut()[n * xs.c * p..(n + 1) * xs.c * p];
            // d patches = Wᵀ · G
            if k == 1 {
                T::gemm(kk, co, p, weight.data(), (1, kk), g, (p, 1), T::zero(), dst, (p, 1));
            } else {
                T::gemm(kk, co, p, weight.data(), (1, kk), g, (p, 1), T::zero(), &mut gcols, (p, 1));
                col2im(&gcols, xs.c, xs.h, xs.w, k, dst);
            }
        }
    }
    (gi, gw, gb)
}

pub fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    assert!(s.h.is_multiple_of(2) && s.w.is_multiple_of(2), "avg_pool2 needs even spatial dims, got {s}");
    let quarter = T::lit(0.25);
    Tensor::from_fn(s.with_spatial(s.h / 2, s.w / 2), |n, c, y, xx| {
        (x.at(n, c, 2 * y, 2 * xx)
            + x.at(n, c, 2 * y, 2 * xx + 1)
            + x.at(n, c, 2 * y + 1, 2 * xx)
            + x.at(n, c, 2 * y + 1, 2 * xx + 1))
            * quarter
    })
}

pub fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let quarter = T::lit(0.25);
    Tensor::from_fn(s.with_spatial(s.h * 2, s.w * 2), |n, c, y, x| {
        grad_out.at(n, c, y / 2, x / 2) * quarter
    })
}

/// Sums each `factor × factor` block: the adjoint of nearest upsampling.
pub fn upsample_backward<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = grad_out.shape();
    let out = s.with_spatial(s.h / factor, s.w / factor);
    let mut g = Tensor::zeros(out);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad_out.plane(n, c);
            let dst = g.plane_mut(n, c);
            for y in 0..s.h {
                let row = (y / factor) * out.w;
                for x in 0..s.w {
                    dst[row + x / factor] += src[y * s.w + x];
                }
            }
        }
    }
    g
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let first = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let mut out = Tensor::zeros(first.with_channels(c));
    for n in 0..first.n {
        let mut oc = 0;
        for p in parts {
            let ps = p.shape();
            assert_eq!((ps.n, ps.h, ps.w), (first.n, first.h, first.w), "concat shape mismatch");
            for ch in 0..ps.c {
                out.plane_mut(n, oc).copy_from_slice(p.plane(n, ch));
                oc += 1;
            }
        }
    }
    out
}

/// Extracts channels `[start, start + len)`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s.with_channels(len));
    for n in 0..s.n {
        for c in 0..len {
            out.plane_mut(n, c).copy_from_slice(x.plane(n, start + c));
        }
    }
    out
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics over `(n, h, w)`: biased mean and variance.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::lit((s.n * s.plane()) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut v = T::zero();
        for n in 0..s.n {
            for &e in x.plane(n, c) {
                v += (e - m) * (e - m);
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

/// Applies `y = gamma * (x - mean) * inv_std + beta` per channel; returns
/// `(y, x_hat)`.
pub fn batch_norm_apply<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let mut y = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            let src = x.plane(n, c);
            {
                let xh = xhat.plane_mut(n, c);
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - m) * is;
                }
            }
            let xh = xhat.plane(n, c).to_vec();
            for (d, v) in y.plane_mut(n, c).iter_mut().zip(xh) {
                *d = g * v + b;
            }
        }
    }
    (y, xhat)
}

/// Backward of batch norm. With `batch_stats` the statistics are treated
/// as functions of the input (training mode); otherwise they are constants.
/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = grad_out.shape();
    let count = T::lit((s.n * s.plane()) as f64);
    let mut gx = Tensor::zeros(s);
    let mut gg = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            let dy = grad_out.plane(n, c);
            sum_dy += dy.iter().copied().sum::<T>();
            sum_dy_xhat += dot(dy, xhat.plane(n, c));
        }
        gg[c] = sum_dy_xhat;
        gbeta[c] = sum_dy;
        let scale = gamma[c] * inv_std[c];
        for n in 0..s.n {
            let dy = grad_out.plane(n, c).to_vec();
            let xh = xhat.plane(n, c).to_vec();
            let dst = gx.plane_mut(n, c);
            if batch_stats {
                let mean_dy = sum_dy / count;
                let mean_dy_xhat = sum_dy_xhat / count;
                for i in 0..dst.len() {
                    dst[i] = scale * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
                }
            } else {
                for i in 0..dst.len() {
                    dst[i] = scale * dy[i];
                }
            }
        }
    }
    (gx, gg, gbeta)
}

/// Numerically stable `ln(1 + e^v)`.
#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    if v > T::lit(20.0) {
        v
    } else if v < T::lit(-20.0) {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    let src = logits.data();
    let dst = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let mut m = T::neg_infinity();
            for k in 0..s.c {
                m = m.max(src[base + k * p + i]);
            }
            let mut z = T::zero();
            for k in 0..s.c {
                let e = (src[base + k * p + i] - m).exp();
                dst[base + k * p + i] = e;
                z += e;
            }
            for k in 0..s.c {
                dst[base + k * p + i] /= z;
            }
        }
    }
    out
}
