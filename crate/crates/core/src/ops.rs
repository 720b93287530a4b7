//! Forward and backward kernels for the operator set used by the network and
//! the perceptual extractor.
//!
//! Every function here is pure. The autodiff tape in [`crate::autograd`]
//! stitches them together; the inference path in [`crate::stylenet`] calls
//! the forward halves directly.

use crate::tensor::{Scalar, Shape, Tensor, TensorError};

/// Instance normalization epsilon used throughout the network.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Upper bound on the number of im2col elements materialized at once.
const COL_BUDGET: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Mirror without repeating the border: index -1 reads index 1.
    Reflect,
    Zero,
}

/// A convolution layer: weights `(out, in, k, k)`, bias `(1, out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: Padding) -> Result<Self, TensorError> {
        let ws = weight.shape();
        if ws.h != ws.w || ws.h.is_multiple_of(2) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: "square odd kernel".into(),
                actual: ws.to_string(),
            });
        }
        bias.expect_shape("conv2d bias", Shape::vector(ws.n))?;
        if stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: "stride >= 1".into(),
                actual: "0".into(),
            });
        }
        Ok(ConvSpec { weight, bias, stride, padding })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>, TensorError> {
    conv2d_forward(x, &spec.weight, Some(&spec.bias), spec.stride, spec.padding)
}

/// Precomputed source index for each (output coordinate, kernel tap) pair
/// along one axis. `None` marks zero padding.
struct AxisMap {
    kernel: usize,
    stride: usize,
    pad: usize,
    idx: Vec<Option<usize>>,
    /// Per tap, the output range whose source index needs no padding.
    interior: Vec<(usize, usize)>,
}

impl AxisMap {
    fn new(input: usize, output: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        let pad = (kernel - 1) / 2;
        let mut idx = Vec::with_capacity(output * kernel);
        for o in 0..output {
            for k in 0..kernel {
                let i = (o * stride + k) as isize - pad as isize;
                let src = match padding {
                    Padding::Reflect => Some(reflect(i, input)),
                    Padding::Zero if i >= 0 && (i as usize) < input => Some(i as usize),
                    Padding::Zero => None,
                };
                idx.push(src);
            }
        }
        let interior = (0..kernel)
            .map(|k| {
                // o * stride + k - pad in [0, input)
                let lo = pad.saturating_sub(k).div_ceil(stride);
                let hi = ((input + pad).saturating_sub(k)).div_ceil(stride).min(output);
                (lo.min(hi), hi)
            })
            .collect();
        AxisMap {
            kernel,
            stride,
            pad,
            idx,
            interior,
        }
    }

    #[inline]
    fn get(&self, out: usize, tap: usize) -> Option<usize> {
        self.idx[out * self.kernel + tap]
    }
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    debug_assert!(r >= 0 && r <= last);
    r as usize
}

struct ConvGeometry {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: AxisMap,
    cols: AxisMap,
}

impl ConvGeometry {
    fn new(
        x: Shape,
        w: Shape,
        stride: usize,
        padding: Padding,
    ) -> Result<Self, TensorError> {
        if x.c != w.c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: format!("{} input channels", w.c),
                actual: x.to_string(),
            });
        }
        let kernel = w.h;
        let pad = (kernel - 1) / 2;
        if padding == Padding::Reflect && (x.h <= pad || x.w <= pad) {
            return Err(TensorError::TooSmall {
                op: "conv2d",
                h: x.h,
                w: x.w,
                kernel,
            });
        }
        let out_h = x.h.div_ceil(stride);
        let out_w = x.w.div_ceil(stride);
        Ok(ConvGeometry {
            in_c: x.c,
            out_c: w.n,
            kernel,
            in_h: x.h,
            in_w: x.w,
            out_h,
            out_w,
            rows: AxisMap::new(x.h, out_h, kernel, stride, padding),
            cols: AxisMap::new(x.w, out_w, kernel, stride, padding),
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// Output rows handled per im2col chunk.
    fn chunk_rows(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    fn im2col<T: Scalar>(&self, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
        let l = (r1 - r0) * self.out_w;
        let k = self.kernel;
        let plane = self.in_h * self.in_w;
        for ci in 0..self.in_c {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * l..(row + 1) * l];
                    let mut j = 0;
                    for oy in r0..r1 {
                        match self.rows.get(oy, ky) {
                            Some(iy) => {
                                let line = &src[iy * self.in_w..(iy + 1) * self.in_w];
                                let out = &mut dst[j..j + self.out_w];
                                let (lo, hi) = self.cols.interior[kx];
                                for ox in (0..lo).chain(hi..self.out_w) {
                                    out[ox] = match self.cols.get(ox, kx) {
                                        Some(ix) => line[ix],
                                        None => T::zero(),
                                    };
                                }
                                if lo < hi {
                                    let first = lo * self.cols.stride + kx - self.cols.pad;
                                    if self.cols.stride == 1 {
                                        out[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                                    } else {
                                        let s = self.cols.stride;
                                        for (o, v) in out[lo..hi].iter_mut().zip(line[first..].iter().step_by(s)) {
                                            *o = *v;
                                        }
                                    }
                                }
                                j += self.out_w;
                            }
                            None => {
                                dst[j..j + self.out_w].fill(T::zero());
                                j += self.out_w;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let l = (r1 - r0) * self.out_w;
        let k = self.kernel;
        let plane = self.in_h * self.in_w;
        for ci in 0..self.in_c {
            let dst = &mut dx[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * l..(row + 1) * l];
                    let mut j = 0;
                    for oy in r0..r1 {
                        let Some(iy) = self.rows.get(oy, ky) else {
                            j += self.out_w;
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.cols.get(ox, kx) {
                                let d = &mut dst[iy * self.in_w + ix];
                                *d = *d + src[j];
                            }
                            j += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Output channel count at or below which stride-1 convolutions skip
/// im2col and accumulate shifted rows directly.
const DIRECT_MAX_OUT: usize = 4;

impl ConvGeometry {
    /// Input plane with the padding materialized, `(h + k - 1) x (w + k - 1)`
    /// at row stride `pw`.
    fn pad_plane<T: Scalar>(&self, src: &[T], dst: &mut [T], pw: usize) {
        let k = self.kernel;
        dst.fill(T::zero());
        for py in 0..self.in_h + k - 1 {
            // the row map of a stride-1 conv covers every padded row
            let (oy, ky) = if py < k { (0, py) } else { (py + 1 - k, k - 1) };
            let row = &mut dst[py * pw..py * pw + self.in_w + k - 1];
            match self.rows.get(oy, ky) {
                None => {}
                Some(iy) => {
                    let line = &src[iy * self.in_w..(iy + 1) * self.in_w];
                    for (px, d) in row.iter_mut().enumerate() {
                        let (ox, kx) = if px < k { (0, px) } else { (px + 1 - k, k - 1) };
                        *d = match self.cols.get(ox, kx) {
                            Some(ix) => line[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn accumulate_rows<T: Scalar, const K: usize>(out: &mut [T], padded: &[T], taps: &[T]) {
    let taps: &[T; K] = taps.try_into().expect("kernel width");
    for (x, o) in out.iter_mut().enumerate() {
        let win: &[T; K] = padded[x..x + K].try_into().expect("window");
        let mut s = *o;
        for t in 0..K {
            s = s + taps[t] * win[t];
        }
        *o = s;
    }
}

#[inline(always)]
fn direct_conv_body<T: Scalar>(geo: &ConvGeometry, padded: &[T], weight: &[T], dst: &mut [T]) {
    let k = geo.kernel;
    let pw = geo.in_w + k - 1;
    let pplane = (geo.in_h + k - 1) * pw;
    let out_plane = geo.out_h * geo.out_w;
    for co in 0..geo.out_c {
        let out = &mut dst[co * out_plane..(co + 1) * out_plane];
        for ci in 0..geo.in_c {
            let src = &padded[ci * pplane..(ci + 1) * pplane];
            for ky in 0..k {
                let taps = &weight[((co * geo.in_c + ci) * k + ky) * k..][..k];
                for y in 0..geo.out_h {
                    let row = &src[(y + ky) * pw..(y + ky + 1) * pw];
                    let o = &mut out[y * geo.out_w..(y + 1) * geo.out_w];
                    match k {
                        1 => accumulate_rows::<T, 1>(o, row, taps),
                        3 => accumulate_rows::<T, 3>(o, row, taps),
                        5 => accumulate_rows::<T, 5>(o, row, taps),
                        7 => accumulate_rows::<T, 7>(o, row, taps),
                        9 => accumulate_rows::<T, 9>(o, row, taps),
                        _ => {
                            for (x, ov) in o.iter_mut().enumerate() {
                                let mut s = *ov;
                                for t in 0..k {
                                    s = s + taps[t] * row[x + t];
                                }
                                *ov = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn direct_conv_avx2<T: Scalar>(geo: &ConvGeometry, padded: &[T], weight: &[T], dst: &mut [T]) {
    direct_conv_body(geo, padded, weight, dst)
}

fn direct_conv<T: Scalar>(geo: &ConvGeometry, padded: &[T], weight: &[T], dst: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { direct_conv_avx2(geo, padded, weight, dst) };
    }
    direct_conv_body(geo, padded, weight, dst)
}

/// Cross-correlation of `x` with `weight` (no kernel flip), padded by
/// `(k - 1) / 2` on every side. Output spatial size is `ceil(h / stride)`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    let geo = ConvGeometry::new(xs, weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        b.expect_shape("conv2d bias", Shape::vector(geo.out_c))?;
    }
    let out_shape = Shape::new(xs.n, geo.out_c, geo.out_h, geo.out_w);
    let mut out = Tensor::<T>::zeros(out_shape);
    let out_plane = geo.out_h * geo.out_w;
    let patch = geo.patch();
    let direct = stride == 1 && geo.out_c <= DIRECT_MAX_OUT;
    let (ph, pw) = (geo.in_h + geo.kernel - 1, geo.in_w + geo.kernel - 1);
    let step = geo.chunk_rows();
    let mut col = if direct {
        vec![T::zero(); geo.in_c * ph * pw]
    } else {
        vec![T::zero(); patch * step * geo.out_w]
    };

    for n in 0..xs.n {
        let xin = x.sample(n);
        let start = n * geo.out_c * out_plane;
        let dst = &mut out.data_mut()[start..start + geo.out_c * out_plane];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(out_plane).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        if direct {
            let pplane = ph * pw;
            let in_plane = geo.in_h * geo.in_w;
            for ci in 0..geo.in_c {
                geo.pad_plane(&xin[ci * in_plane..(ci + 1) * in_plane], &mut col[ci * pplane..(ci + 1) * pplane], pw);
            }
            direct_conv(&geo, &col, weight.data(), dst);
            continue;
        }
        let mut r0 = 0;
        while r0 < geo.out_h {
            let r1 = (r0 + step).min(geo.out_h);
            let l = (r1 - r0) * geo.out_w;
            geo.im2col(xin, r0, r1, &mut col[..patch * l]);
            T::gemm(
                geo.out_c,
                patch,
                l,
                T::one(),
                weight.data(),
                (patch as isize, 1),
                &col[..patch * l],
                (l as isize, 1),
                T::one(),
                &mut dst[r0 * geo.out_w..],
                (out_plane as isize, 1),
            );
            r0 = r1;
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input (when requested),
/// weights and bias.
pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>, TensorError> {
    let xs = x.shape();
    let geo = ConvGeometry::new(xs, weight.shape(), stride, padding)?;
    grad_out.expect_shape(
        "conv2d backward",
        Shape::new(xs.n, geo.out_c, geo.out_h, geo.out_w),
    )?;
    let out_plane = geo.out_h * geo.out_w;
    let patch = geo.patch();
    let step = geo.chunk_rows();
    let mut col = vec![T::zero(); patch * step * geo.out_w];
    let mut dcol = vec![T::zero(); if want_input { patch * step * geo.out_w } else { 0 }];
    let mut dw = Tensor::<T>::zeros(weight.shape());
    let mut db = Tensor::<T>::zeros(Shape::vector(geo.out_c));
    let mut dx = want_input.then(|| Tensor::<T>::zeros(xs));

    for n in 0..xs.n {
        let gy = grad_out.sample(n);
        for co in 0..geo.out_c {
            let s: T = gy[co * out_plane..(co + 1) * out_plane].iter().copied().sum();
            db.data_mut()[co] = db.data()[co] + s;
        }
        let xin = x.sample(n);
        let mut r0 = 0;
        while r0 < geo.out_h {
            let r1 = (r0 + step).min(geo.out_h);
            let l = (r1 - r0) * geo.out_w;
            geo.im2col(xin, r0, r1, &mut col[..patch * l]);
            let gy_chunk = &gy[r0 * geo.out_w..];
            // dW += dY (out_c x l) * col^T (l x patch)
            T::gemm(
                geo.out_c,
                l,
                patch,
                T::one(),
                gy_chunk,
                (out_plane as isize, 1),
                &col[..patch * l],
                (1, l as isize),
                T::one(),
                dw.data_mut(),
                (patch as isize, 1),
            );
            if let Some(dx) = dx.as_mut() {
                // dcol = W^T (patch x out_c) * dY (out_c x l)
                T::gemm(
                    patch,
                    geo.out_c,
                    l,
                    T::one(),
                    weight.data(),
                    (1, patch as isize),
                    gy_chunk,
                    (out_plane as isize, 1),
                    T::zero(),
                    &mut dcol[..patch * l],
                    (l as isize, 1),
                );
                let plane = xs.c * xs.plane();
                let dst = &mut dx.data_mut()[n * plane..(n + 1) * plane];
                geo.col2im(&dcol[..patch * l], r0, r1, dst);
            }
            r0 = r1;
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Intermediate values kept by the forward pass of instance normalization.
pub struct NormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    /// `1 / sqrt(var + eps)` per (sample, channel).
    pub inv_std: Vec<T>,
}

pub fn instance_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    gamma.expect_shape("instance_norm gamma", Shape::vector(s.c))?;
    beta.expect_shape("instance_norm beta", Shape::vector(s.c))?;
    let mut y = Tensor::<T>::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            let (mean, inv) = plane_moments(plane, eps);
            let (g, b) = (gamma.data()[c].as_f64(), beta.data()[c].as_f64());
            for (dst, v) in y.plane_mut(n, c).iter_mut().zip(plane) {
                let normalized = T::from_f64((v.as_f64() - mean) * inv);
                *dst = T::from_f64(g * normalized.as_f64() + b);
            }
        }
    }
    Ok(y)
}

/// Mean and `1 / sqrt(var + eps)` of one plane, population variance.
fn plane_moments<T: Scalar>(plane: &[T], eps: f64) -> (f64, f64) {
    let count = plane.len() as f64;
    let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / count;
    let var = plane
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / count;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>), TensorError> {
    let s = x.shape();
    gamma.expect_shape("instance_norm gamma", Shape::vector(s.c))?;
    beta.expect_shape("instance_norm beta", Shape::vector(s.c))?;
    let mut y = Tensor::<T>::zeros(s);
    let mut xhat = Tensor::<T>::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            let (mean, inv) = plane_moments(plane, eps);
            inv_std.push(T::from_f64(inv));
            let (g, b) = (gamma.data()[c].as_f64(), beta.data()[c].as_f64());
            let out = y.plane_mut(n, c);
            for ((dst, xh), v) in out.iter_mut().zip(xhat.plane_mut(n, c)).zip(plane) {
                let normalized = T::from_f64((v.as_f64() - mean) * inv);
                *xh = normalized;
                *dst = T::from_f64(g * normalized.as_f64() + b);
            }
        }
    }
    Ok((y, NormCache { normalized: xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let count = s.plane() as f64;
    let mut dx = Tensor::<T>::zeros(s);
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let gy = grad_out.plane(n, c);
            let xh = cache.normalized.plane(n, c);
            let g = gamma.data()[c].as_f64();
            let inv = cache.inv_std[n * s.c + c].as_f64();
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for (&dy, &v) in gy.iter().zip(xh) {
                sum_dy += dy.as_f64();
                sum_dy_xh += dy.as_f64() * v.as_f64();
            }
            dgamma[c] += sum_dy_xh;
            dbeta[c] += sum_dy;
            let scale = g * inv / count;
            for ((dst, &dy), &v) in dx.plane_mut(n, c).iter_mut().zip(gy).zip(xh) {
                *dst = T::from_f64(
                    scale * (count * dy.as_f64() - sum_dy - v.as_f64() * sum_dy_xh),
                );
            }
        }
    }
    let to_vec = |v: Vec<f64>| Tensor::from_f64(Shape::vector(s.c), &v).expect("vector shape");
    (dx, to_vec(dgamma), to_vec(dbeta))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
        .expect("relu grad shape")
}

/// Nearest-neighbour upsampling by 2: `out(i, j) = in(i / 2, j / 2)`.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor::<T>::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..s.h {
                let srow = &src[i * s.w..(i + 1) * s.w];
                let (even, odd) = dst[2 * i * os.w..(2 * i + 2) * os.w].split_at_mut(os.w);
                for (pair, &v) in even.chunks_exact_mut(2).zip(srow) {
                    pair[0] = v;
                    pair[1] = v;
                }
                odd.copy_from_slice(even);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let os = grad_out.shape();
    let s = Shape::new(os.n, os.c, os.h / 2, os.w / 2);
    let mut dx = Tensor::<T>::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad_out.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for i in 0..os.h {
                for j in 0..os.w {
                    let d = &mut dst[(i / 2) * s.w + j / 2];
                    *d = *d + src[i * os.w + j];
                }
            }
        }
    }
    dx
}

/// Keeps the top-left pixel of every 2x2 block.
pub fn downsample_nearest<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    require_divisible("downsample_nearest", s, 2)?;
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    Ok(Tensor::from_fn(os, |n, c, h, w| x.at(n, c, 2 * h, 2 * w)))
}

/// 2x2 max pooling with stride 2. Also returns the flat argmax index of each
/// output element for the backward pass.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let s = x.shape();
    require_divisible("max_pool2", s, 2)?;
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::<T>::zeros(os);
    let mut arg = Vec::with_capacity(os.numel());
    let src = x.data();
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..os.h {
                for j in 0..os.w {
                    let base = s.offset(n, c, 2 * i, 2 * j);
                    let mut best = base;
                    for cand in [base + 1, base + s.w, base + s.w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    out.data_mut()[k] = src[best];
                    arg.push(best);
                    k += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Scalar>(input: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::<T>::zeros(input);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        let d = &mut dx.data_mut()[i];
        *d = *d + g;
    }
    dx
}

/// Per-channel `x * scale[c] + shift[c]`.
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if scale.len() != s.c || shift.len() != s.c {
        return Err(TensorError::ShapeMismatch {
            op: "channel_affine",
            expected: format!("{} channels", scale.len()),
            actual: s.to_string(),
        });
    }
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            for v in out.plane_mut(n, c) {
                *v = *v * scale[c] + shift[c];
            }
        }
    }
    Ok(out)
}

/// Relative luminance `0.2126 R + 0.7152 G + 0.0722 B`, giving one channel.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub fn luminance<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.c != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "luminance",
            expected: "3 channels".into(),
            actual: s.to_string(),
        });
    }
    let coef = LUMA.map(T::from_f64);
    let os = Shape::new(s.n, 1, s.h, s.w);
    let mut out = Tensor::<T>::zeros(os);
    for n in 0..s.n {
        let (r, g, b) = (x.plane(n, 0), x.plane(n, 1), x.plane(n, 2));
        for (i, d) in out.plane_mut(n, 0).iter_mut().enumerate() {
            *d = coef[0] * r[i] + coef[1] * g[i] + coef[2] * b[i];
        }
    }
    Ok(out)
}

pub(crate) fn require_divisible(op: &'static str, s: Shape, factor: usize) -> Result<(), TensorError> {
    if !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
        return Err(TensorError::NotDivisible {
            op,
            h: s.h,
            w: s.w,
            factor,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let pad = (ws.h - 1) as isize / 2;
        let (oh, ow) = (xs.h.div_ceil(stride), xs.w.div_ceil(stride));
        let fetch = |n: usize, c: usize, y: isize, xx: isize| -> f64 {
            let inside = |i: isize, len: usize| (0..len as isize).contains(&i);
            match padding {
                Padding::Zero if !inside(y, xs.h) || !inside(xx, xs.w) => 0.0,
                Padding::Zero => x.at(n, c, y as usize, xx as usize),
                Padding::Reflect => x.at(n, c, reflect(y, xs.h), reflect(xx, xs.w)),
            }
        };
        Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, y, xx| {
            let mut acc = b.data()[o];
            for c in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (y * stride + ky) as isize - pad;
                        let ix = (xx * stride + kx) as isize - pad;
                        acc += w.at(o, c, ky, kx) * fetch(n, c, iy, ix);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn every_kernel_path_matches_naive() {
        let mut rng = crate::rng::SplitMix64::new(11);
        // (out_c, k, stride) covering the direct and im2col paths
        for &(oc, k, stride) in &[(2, 3, 1), (3, 9, 1), (6, 3, 1), (9, 3, 1), (6, 5, 1), (6, 3, 2), (2, 3, 2)] {
            for padding in [Padding::Reflect, Padding::Zero] {
                for &(h, w) in &[(7, 5), (8, 6), (5, 11)] {
                    let x = Tensor::from_fn(Shape::new(2, 4, h, w), |_, _, _, _| rng.symmetric(1.0));
                    let wt = Tensor::from_fn(Shape::new(oc, 4, k, k), |_, _, _, _| rng.symmetric(1.0));
                    let b = Tensor::from_fn(Shape::vector(oc), |_, _, _, _| rng.symmetric(1.0));
                    if padding == Padding::Reflect && (h <= k / 2 || w <= k / 2) {
                        continue;
                    }
                    let got = conv2d_forward(&x, &wt, Some(&b), stride, padding).unwrap();
                    let want = naive_conv(&x, &wt, &b, stride, padding);
                    assert!(got.max_abs_diff(&want) < 1e-12, "{oc} {k} {stride} {padding:?} {h}x{w}");
                }
            }
        }
    }

    fn ones_kernel(k: usize) -> ConvSpec<f64> {
        ConvSpec::new(
            Tensor::full(Shape::new(1, 1, k, k), 1.0),
            Tensor::zeros(Shape::vector(1)),
            1,
            Padding::Reflect,
        )
        .unwrap()
    }

    #[test]
    fn reflect_does_not_repeat_border() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn conv_center_and_corner_values() {
        let x = t(Shape::new(1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let y = conv2d(&x, &ones_kernel(3)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        // reflected neighbourhood 5,4,5 / 2,1,2 / 5,4,5
        assert_eq!(y.at(0, 0, 0, 0), 33.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 5, 4), |n, c, h, w| {
            (n * 7 + c * 3 + h * 2 + w) as f64 * 0.25 - 1.0
        });
        let mut w = Tensor::zeros(Shape::new(3, 3, 3, 3));
        for c in 0..3 {
            *w.at_mut(c, c, 1, 1) = 1.0;
        }
        let spec = ConvSpec::new(w, Tensor::zeros(Shape::vector(3)), 1, Padding::Reflect).unwrap();
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn strided_output_size_is_ceiling() {
        let spec = ConvSpec::new(
            Tensor::<f32>::full(Shape::new(2, 1, 3, 3), 0.1),
            Tensor::zeros(Shape::vector(2)),
            2,
            Padding::Reflect,
        )
        .unwrap();
        let y = conv2d(&Tensor::zeros(Shape::new(1, 1, 256, 256)), &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 128, 128));
        let y = conv2d(&Tensor::zeros(Shape::new(1, 1, 7, 5)), &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 4, 3));
    }

    #[test]
    fn conv_rejects_bad_input() {
        let spec = ones_kernel(3);
        assert!(matches!(
            conv2d(&Tensor::zeros(Shape::new(1, 2, 4, 4)), &spec),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            conv2d(&Tensor::zeros(Shape::new(1, 1, 1, 4)), &spec),
            Err(TensorError::TooSmall { .. })
        ));
        let spec9 = ones_kernel(9);
        assert!(conv2d(&Tensor::zeros(Shape::new(1, 1, 5, 5)), &spec9).is_ok());
        assert!(conv2d(&Tensor::zeros(Shape::new(1, 1, 4, 5)), &spec9).is_err());
        assert!(ConvSpec::new(
            Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2)),
            Tensor::zeros(Shape::vector(1)),
            1,
            Padding::Reflect
        )
        .is_err());
    }

    #[test]
    fn instance_norm_hand_values() {
        let x = t(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]);
        let y = instance_norm(&x, &t(Shape::vector(1), &[1.]), &t(Shape::vector(1), &[0.]), 0.0).unwrap();
        let want = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn instance_norm_constant_and_zero_gamma() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 7.0);
        let ones = Tensor::full(Shape::vector(2), 1.0);
        let zeros = Tensor::zeros(Shape::vector(2));
        let y = instance_norm(&x, &ones, &zeros, INSTANCE_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-3));

        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 3, 3), |n, c, h, w| (n + c * h + w) as f64);
        let y = instance_norm(&x, &zeros, &Tensor::full(Shape::vector(2), 5.0), INSTANCE_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));

        assert!(instance_norm(&x, &Tensor::zeros(Shape::vector(3)), &zeros, 1e-5).is_err());
    }

    #[test]
    fn instance_norm_beta_gradient_is_plane_size() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 4), |_, c, h, w| (c + h * w) as f64 * 0.3);
        let gamma = Tensor::full(Shape::vector(2), 1.5);
        let beta = Tensor::zeros(Shape::vector(2));
        let (y, cache) = instance_norm_forward(&x, &gamma, &beta, INSTANCE_NORM_EPS).unwrap();
        let (_, _, dbeta) = instance_norm_backward(&cache, &gamma, &Tensor::full(y.shape(), 1.0));
        assert_eq!(dbeta.data(), &[12.0, 12.0]);
    }

    #[test]
    fn relu_cases() {
        let x = t(Shape::new(1, 1, 1, 3), &[-1., 0., 2.]);
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        assert_eq!(relu(&relu(&x)), relu(&x));
        let neg = t(Shape::new(1, 1, 1, 3), &[-1., -0.5, -2.]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_cases() {
        let x = t(Shape::new(1, 1, 1, 1), &[3.]);
        let y = upsample_nearest(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 3.0));

        let x = t(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]);
        assert_eq!(
            upsample_nearest(&x).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );

        let c = Tensor::<f64>::full(Shape::new(1, 2, 4, 6), 0.75);
        assert_eq!(upsample_nearest(&downsample_nearest(&c).unwrap()), c);
    }

    #[test]
    fn max_pool_picks_block_maximum() {
        let x = t(Shape::new(1, 1, 2, 4), &[1., 5., 0., -1., 3., 2., -2., -3.]);
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5., 0.]);
        let dx = max_pool2_backward(x.shape(), &arg, &t(Shape::new(1, 1, 1, 2), &[1., 2.]));
        assert_eq!(dx.data(), &[0., 1., 2., 0., 0., 0., 0., 0.]);
    }
}
