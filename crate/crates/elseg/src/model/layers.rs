//! Differentiable layer primitives over `(B, C, H, W)` arrays of `f64`.
//!
//! Convolutions run as im2col + GEMM per batch element, parallelized across
//! the batch; gradient reductions over the batch are summed in index order so
//! results do not depend on the thread count.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Output spatial size of a strided, padded, dilated window op.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    (input + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1
}

/// Valid `ox` range such that `ox * stride + k_off - pad` lies in `[0, len)`.
fn valid_out_range(len: usize, out_len: usize, stride: usize, k_off: usize, pad: usize) -> (usize, usize) {
    // smallest ox with ox*stride + k_off - pad >= 0
    let lo = pad.saturating_sub(k_off).div_ceil(stride).min(out_len);
    // largest ox with ox*stride + k_off - pad < len
    let hi = if len + pad > k_off {
        ((len + pad - k_off - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut col = Array2::<f64>::zeros((cin * kh * kw, out_h * out_w));
    let cs = col.as_slice_mut().expect("freshly allocated");
    let out_hw = out_h * out_w;
    for ci in 0..cin {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(h, out_h, stride, ky * dilation, pad);
            for kx in 0..kw {
                let row_base = ((ci * kh + ky) * kw + kx) * out_hw;
                let (ox_lo, ox_hi) = valid_out_range(w, out_w, stride, kx * dilation, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let sy = oy * stride + ky * dilation - pad;
                    let src = &plane[sy * w..sy * w + w];
                    let dst = &mut cs[row_base + oy * out_w..row_base + oy * out_w + out_w];
                    if stride == 1 {
                        let sx0 = ox_lo + kx * dilation - pad;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[sx0..sx0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * stride + kx * dilation - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    out_h: usize,
    out_w: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((cin, h, w));
    let dxs = dx.as_slice_mut().expect("freshly allocated");
    let cs = dcol.as_slice().expect("standard layout");
    let out_hw = out_h * out_w;
    for ci in 0..cin {
        let plane_off = ci * h * w;
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(h, out_h, stride, ky * dilation, pad);
            for kx in 0..kw {
                let row_base = ((ci * kh + ky) * kw + kx) * out_hw;
                let (ox_lo, ox_hi) = valid_out_range(w, out_w, stride, kx * dilation, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let sy = oy * stride + ky * dilation - pad;
                    let src = &cs[row_base + oy * out_w..row_base + oy * out_w + out_w];
                    let dst = &mut dxs[plane_off + sy * w..plane_off + sy * w + w];
                    if stride == 1 {
                        let sx0 = ox_lo + kx * dilation - pad;
                        for (d, s) in dst[sx0..sx0 + (ox_hi - ox_lo)].iter_mut().zip(&src[ox_lo..ox_hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox * stride + kx * dilation - pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2-D convolution with bias.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    /// `(cout, cin * kh * kw)` weight matrix.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = cin * kernel * kernel;
        // Kaiming-normal via Box-Muller, std = sqrt(2 / fan_in)
        let std = (2.0 / k as f64).sqrt();
        let weight = Array2::from_shape_fn((cout, k), |_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
        });
        Conv2d {
            weight,
            bias: Array1::zeros(cout),
            grad_weight: Array2::zeros((cout, k)),
            grad_bias: Array1::zeros(cout),
            cin,
            cout,
            kernel: (kernel, kernel),
            stride,
            pad,
            dilation,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.kernel.0, self.stride, self.pad, self.dilation),
            conv_out_dim(w, self.kernel.1, self.stride, self.pad, self.dilation),
        )
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let (b, _, h, w) = x.dim();
        let (oh, ow) = self.out_dims(h, w);
        let slices: Vec<Array2<f64>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(
                    &x.index_axis(Axis(0), bi),
                    self.kernel.0,
                    self.kernel.1,
                    self.stride,
                    self.pad,
                    self.dilation,
                    oh,
                    ow,
                );
                let mut y = self.weight.dot(&col);
                for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
                    row.mapv_inplace(|v| v + b);
                }
                y
            })
            .collect();
        let mut out = Array4::<f64>::zeros((b, self.cout, oh, ow));
        for (bi, y) in slices.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), bi).assign(
                &y.into_shape_with_order((self.cout, oh, ow)).expect("conv output shape"),
            );
        }
        out
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, x: &ArrayView4<f64>, grad_out: &ArrayView4<f64>) -> Array4<f64> {
        let (b, _, h, w) = x.dim();
        let (_, _, oh, ow) = grad_out.dim();
        let parts: Vec<(Array2<f64>, Array1<f64>, Array3<f64>)> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(
                    &x.index_axis(Axis(0), bi),
                    self.kernel.0,
                    self.kernel.1,
                    self.stride,
                    self.pad,
                    self.dilation,
                    oh,
                    ow,
                );
                let dy_owned = grad_out
                    .index_axis(Axis(0), bi)
                    .to_owned()
                    .into_shape_with_order((self.cout, oh * ow))
                    .expect("grad shape");
                let gw = dy_owned.dot(&col.t());
                let gb = dy_owned.sum_axis(Axis(1));
                let dcol = self.weight.t().dot(&dy_owned);
                let dx = col2im(
                    &dcol,
                    self.cin,
                    h,
                    w,
                    self.kernel.0,
                    self.kernel.1,
                    self.stride,
                    self.pad,
                    self.dilation,
                    oh,
                    ow,
                );
                (gw, gb, dx)
            })
            .collect();

        let mut dx = Array4::<f64>::zeros((b, self.cin, h, w));
        for (bi, (gw, gb, dxb)) in parts.into_iter().enumerate() {
            self.grad_weight += &gw;
            self.grad_bias += &gb;
            dx.index_axis_mut(Axis(0), bi).assign(&dxb);
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Per-channel affine `y = x * scale + shift` (a folded normalization).
#[derive(Debug, Clone)]
pub(crate) struct ChannelAffine {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub grad_scale: Array1<f64>,
    pub grad_shift: Array1<f64>,
}

impl ChannelAffine {
    pub fn new(channels: usize) -> Self {
        ChannelAffine {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
            grad_scale: Array1::zeros(channels),
            grad_shift: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let mut out = x.to_owned();
        for (c, (s, b)) in self.scale.iter().zip(self.shift.iter()).enumerate() {
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s + b);
        }
        out
    }

    pub fn backward(&mut self, x: &ArrayView4<f64>, grad_out: &ArrayView4<f64>) -> Array4<f64> {
        let mut dx = grad_out.to_owned();
        for c in 0..self.scale.len() {
            let xc = x.index_axis(Axis(1), c);
            let gc = grad_out.index_axis(Axis(1), c);
            let mut gs = 0.0;
            let mut gb = 0.0;
            for (xv, gv) in xc.iter().zip(gc.iter()) {
                gs += xv * gv;
                gb += gv;
            }
            self.grad_scale[c] += gs;
            self.grad_shift[c] += gb;
            let s = self.scale[c];
            dx.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s);
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.scale.len() + self.shift.len()
    }
}

pub(crate) fn relu_forward(x: &ArrayView4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn relu_backward(x: &ArrayView4<f64>, grad_out: &ArrayView4<f64>) -> Array4<f64> {
    let mut dx = grad_out.to_owned();
    dx.zip_mut_with(x, |g, &xv| {
        if xv <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Source indices and blend weight per output coordinate (half-pixel centers).
fn interp_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear upsample to an explicit spatial size (half-pixel centers).
pub(crate) fn upsample_forward(x: &ArrayView4<f64>, out_h: usize, out_w: usize) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.to_owned();
    }
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let ys = interp_table(h, out_h);
    let xs_tab = interp_table(w, out_w);
    let mut out = Array4::<f64>::zeros((b, c, out_h, out_w));
    let os = out.as_slice_mut().expect("freshly allocated");
    for plane in 0..b * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut os[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in xs_tab.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                row[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_forward`]: scatter output grads back with the same
/// interpolation weights.
pub(crate) fn upsample_backward(grad_out: &ArrayView4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (b, c, oh, ow) = grad_out.dim();
    if (oh, ow) == (in_h, in_w) {
        return grad_out.to_owned();
    }
    let g = grad_out.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let ys = interp_table(in_h, oh);
    let xs_tab = interp_table(in_w, ow);
    let mut dx = Array4::<f64>::zeros((b, c, in_h, in_w));
    let ds = dx.as_slice_mut().expect("freshly allocated");
    for plane in 0..b * c {
        let src = &gs[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut ds[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row = &src[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xs_tab.iter().enumerate() {
                let gv = row[ox];
                dst[y0 * in_w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * in_w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * in_w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * in_w + x1] += gv * fy * fx;
            }
        }
    }
    dx
}

/// Max pooling; ties resolve to the first maximum in scan order.
pub(crate) fn maxpool_forward(
    x: &ArrayView4<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_dim(h, kernel, stride, pad, 1);
    let ow = conv_out_dim(w, kernel, stride, pad, 1);
    let mut out = Array4::<f64>::from_elem((b, c, oh, ow), f64::NEG_INFINITY);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..kernel {
                        let sy = (oy * stride + ky) as i64 - pad as i64;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kernel {
                            let sx = (ox * stride + kx) as i64 - pad as i64;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            let v = x[(bi, ci, sy as usize, sx as usize)];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[(bi, ci, oy, ox)] = best;
                }
            }
        }
    }
    out
}

pub(crate) fn maxpool_backward(
    x: &ArrayView4<f64>,
    grad_out: &ArrayView4<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let (_, _, oh, ow) = grad_out.dim();
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_pos = None;
                    for ky in 0..kernel {
                        let sy = (oy * stride + ky) as i64 - pad as i64;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kernel {
                            let sx = (ox * stride + kx) as i64 - pad as i64;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            let v = x[(bi, ci, sy as usize, sx as usize)];
                            if v > best {
                                best = v;
                                best_pos = Some((sy as usize, sx as usize));
                            }
                        }
                    }
                    if let Some((sy, sx)) = best_pos {
                        dx[(bi, ci, sy, sx)] += grad_out[(bi, ci, oy, ox)];
                    }
                }
            }
        }
    }
    dx
}

/// Global average pool to `(B, C, 1, 1)`.
pub(crate) fn global_pool_forward(x: &ArrayView4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Array4::<f64>::zeros((b, c, 1, 1));
    for bi in 0..b {
        for ci in 0..c {
            out[(bi, ci, 0, 0)] = x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() * inv;
        }
    }
    out
}

pub(crate) fn global_pool_backward(grad_out: &ArrayView4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (b, c, _, _) = grad_out.dim();
    let inv = 1.0 / (in_h * in_w) as f64;
    let mut dx = Array4::<f64>::zeros((b, c, in_h, in_w));
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out[(bi, ci, 0, 0)] * inv;
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}
