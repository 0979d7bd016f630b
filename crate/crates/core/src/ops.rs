//! Layer primitives with hand-written backward passes.
//!
//! Every backward function *accumulates* into the gradient buffers it is
//! handed, so gradients of several tiles can be summed without temporaries.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Zero padding applied on both spatial axes; `before` rows/cols on the
/// top/left and `after` on the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub before: usize,
    pub after: usize,
}

impl Padding {
    /// Size-preserving padding for a `k x k` kernel. Even kernels put the
    /// extra row/column at the bottom/right.
    pub fn same(k: usize) -> Self {
        let before = (k - 1) / 2;
        Self {
            before,
            after: k - 1 - before,
        }
    }
}

fn conv_out_dim(input: usize, k: usize, pad: Padding) -> Result<usize> {
    let padded = input + pad.before + pad.after;
    if padded < k {
        return Err(Error::Shape(format!("kernel {k} larger than padded input {padded}")));
    }
    Ok(padded - k + 1)
}

fn check_conv(input: &Tensor4<impl Scalar>, weight: &Tensor4<impl Scalar>) -> Result<usize> {
    let [_, cin, kh, kw] = weight.shape();
    if kh != kw {
        return Err(Error::Shape(format!("non-square kernel {kh}x{kw}")));
    }
    if kh % 2 == 0 && kh != 2 {
        return Err(Error::Shape(format!("even kernel size {kh} unsupported")));
    }
    if cin != input.channels() {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {cin}",
            input.channels()
        )));
    }
    Ok(kh)
}

/// Patch-matrix elements materialized at once in the forward pass.
const COL_BUDGET: usize = 1 << 22;

/// Unfolds output rows `rows` of one batch item `(c, h, w)` into a
/// `(c*k*k, rows.len()*wo)` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: Padding,
    rows: std::ops::Range<usize>,
    wo: usize,
    col: &mut [T],
) {
    let n = rows.len() * wo;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for (r, oy) in rows.clone().enumerate() {
                    let d = &mut dst[r * wo..(r + 1) * wo];
                    let iy = oy as isize + ky as isize - pad.before as isize;
                    if iy < 0 || iy >= h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kx as isize - pad.before as isize;
                    // valid ox range: 0 <= ox + shift < w
                    let lo = (-shift).clamp(0, wo as isize) as usize;
                    let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                    d[..lo].fill(T::zero());
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        d[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                    }
                    d[hi.max(lo)..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: Padding,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad.before as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let shift = kx as isize - pad.before as isize;
                    let lo = (-shift).clamp(0, wo as isize) as usize;
                    let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                    if hi <= lo {
                        continue;
                    }
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    let d0 = iy as usize * w + (lo as isize + shift) as usize;
                    for (d, &v) in plane[d0..d0 + (hi - lo)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero padding.
///
/// `weight` has shape `(c_out, c_in, k, k)`; `bias` has `c_out` entries.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    pad: Padding,
) -> Result<Tensor4<T>> {
    conv2d_chunked(input, weight, bias, pad, COL_BUDGET)
}

fn conv2d_chunked<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    pad: Padding,
    col_budget: usize,
) -> Result<Tensor4<T>> {
    let k = check_conv(input, weight)?;
    let [nb, cin, h, w] = input.shape();
    let cout = weight.batch();
    if bias.len() != cout {
        return Err(Error::Shape(format!("bias has {} entries, expected {cout}", bias.len())));
    }
    let ho = conv_out_dim(h, k, pad)?;
    let wo = conv_out_dim(w, k, pad)?;
    let mut out = Tensor4::zeros([nb, cout, ho, wo]);
    let kk = cin * k * k;
    let npix = ho * wo;
    let pointwise = k == 1 && pad.before == 0 && pad.after == 0;
    // output rows per im2col chunk, bounding the patch buffer
    let chunk_rows = if pointwise { ho } else { (col_budget / (kk * wo).max(1)).clamp(1, ho.max(1)) };
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * chunk_rows * wo] };
    for n in 0..nb {
        let dst = out.item_mut(n);
        for (co, plane) in dst.chunks_exact_mut(npix).enumerate() {
            plane.fill(bias[co]);
        }
        if pointwise {
            T::gemm(
                cout, kk, npix, T::one(), weight.data(), kk, 1, input.item(n), npix, 1, T::one(), dst, npix, 1,
            );
            continue;
        }
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + chunk_rows).min(ho);
            let cols = (r1 - r0) * wo;
            im2col(input.item(n), cin, h, w, k, pad, r0..r1, wo, &mut col[..kk * cols]);
            T::gemm(
                cout,
                kk,
                cols,
                T::one(),
                weight.data(),
                kk,
                1,
                &col[..kk * cols],
                cols,
                1,
                T::one(),
                &mut dst[r0 * wo..],
                npix,
                1,
            );
            r0 = r1;
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`].
///
/// Accumulates `dL/dweight` and `dL/dbias`; when `grad_input` is given,
/// accumulates `dL/dinput` into it as well.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    pad: Padding,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    mut grad_input: Option<&mut Tensor4<T>>,
) -> Result<()> {
    let k = check_conv(input, weight)?;
    let [nb, cin, h, w] = input.shape();
    let cout = weight.batch();
    let (ho, wo) = (grad_out.height(), grad_out.width());
    if grad_out.shape() != [nb, cout, conv_out_dim(h, k, pad)?, conv_out_dim(w, k, pad)?] {
        return Err(Error::Shape("conv2d_backward: gradient shape mismatch".into()));
    }
    if grad_weight.len() != weight.len() || grad_bias.len() != cout {
        return Err(Error::Shape("conv2d_backward: parameter gradient size mismatch".into()));
    }
    if let Some(gi) = grad_input.as_deref() {
        if gi.shape() != input.shape() {
            return Err(Error::Shape("conv2d_backward: input gradient shape mismatch".into()));
        }
    }
    let kk = cin * k * k;
    let npix = ho * wo;
    let pointwise = k == 1 && pad.before == 0 && pad.after == 0;
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * npix] };
    let mut dcol = if pointwise || grad_input.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); kk * npix]
    };
    for n in 0..nb {
        let go = grad_out.item(n);
        for (co, plane) in go.chunks_exact(npix).enumerate() {
            grad_bias[co] += plane.iter().copied().sum::<T>();
        }
        let patches: &[T] = if pointwise {
            input.item(n)
        } else {
            im2col(input.item(n), cin, h, w, k, pad, 0..ho, wo, &mut col);
            &col
        };
        // dW (cout x kk) += dOut (cout x npix) * patches^T (npix x kk)
        T::gemm(cout, npix, kk, T::one(), go, npix, 1, patches, 1, npix, T::one(), grad_weight, kk, 1);
        if let Some(gi) = grad_input.as_deref_mut() {
            let dst = gi.item_mut(n);
            if pointwise {
                // dIn (cin x npix) += W^T (cin x cout) * dOut
                T::gemm(cin, cout, npix, T::one(), weight.data(), 1, kk, go, npix, 1, T::one(), dst, npix, 1);
            } else {
                T::gemm(kk, cout, npix, T::one(), weight.data(), 1, kk, go, npix, 1, T::zero(), &mut dcol, npix, 1);
                col2im(&dcol, cin, h, w, k, pad, ho, wo, dst);
            }
        }
    }
    Ok(())
}

/// 2x2 max pooling; returns the pooled tensor and, per output element, the
/// flat index of the selected input element. Ties go to the first element
/// in row-major block order.
pub fn pool2<T: Scalar>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let [nb, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("pool2 needs even dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([nb, c, ho, wo]);
    let mut arg = Vec::with_capacity(out.len());
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..nb * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[o] = src[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

/// Routes each output gradient to its argmax input, accumulating.
pub fn pool2_backward<T: Scalar>(grad_out: &Tensor4<T>, argmax: &[u32], grad_input: &mut Tensor4<T>) {
    debug_assert_eq!(grad_out.len(), argmax.len());
    let gi = grad_input.data_mut();
    for (&g, &a) in grad_out.data().iter().zip(argmax) {
        gi[a as usize] += g;
    }
}

/// Nearest-neighbour upsampling by `factor` (only 2 is used by the networks).
pub fn upsample_nearest<T: Scalar>(input: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor != 2 {
        return Err(Error::Shape(format!("upsample factor {factor} unsupported")));
    }
    let [nb, c, h, w] = input.shape();
    let (ho, wo) = (h * 2, w * 2);
    let mut out = Tensor4::zeros([nb, c, ho, wo]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..nb * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..h {
            let srow = &s[y * w..(y + 1) * w];
            let (r0, r1) = d[2 * y * wo..(2 * y + 2) * wo].split_at_mut(wo);
            for (x, &v) in srow.iter().enumerate() {
                r0[2 * x] = v;
                r0[2 * x + 1] = v;
            }
            r1.copy_from_slice(r0);
        }
    }
    Ok(out)
}

/// Sums gradients over each replicated block, accumulating.
pub fn upsample_nearest_backward<T: Scalar>(grad_out: &Tensor4<T>, grad_input: &mut Tensor4<T>) {
    let [nb, c, h, w] = grad_input.shape();
    let wo = w * 2;
    let g = grad_out.data();
    let gi = grad_input.data_mut();
    for plane in 0..nb * c {
        let go = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let d = &mut gi[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * wo + 2 * x;
                d[y * w + x] += go[i] + go[i + 1] + go[i + wo] + go[i + wo + 1];
            }
        }
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [na, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if na != nb || h != hb || w != wb {
        return Err(Error::Shape(format!(
            "concat mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor4::zeros([na, ca + cb, h, w]);
    for n in 0..na {
        let (da, db) = out.item_mut(n).split_at_mut(ca * h * w);
        da.copy_from_slice(a.item(n));
        db.copy_from_slice(b.item(n));
    }
    Ok(out)
}

/// Splits a concatenated gradient, accumulating into both parts.
pub fn concat_channels_backward<T: Scalar>(grad_out: &Tensor4<T>, grad_a: &mut Tensor4<T>, grad_b: &mut Tensor4<T>) {
    let ca = grad_a.channels();
    let plane = grad_a.plane_len();
    for n in 0..grad_out.batch() {
        let (ga, gb) = grad_out.item(n).split_at(ca * plane);
        for (d, &s) in grad_a.item_mut(n).iter_mut().zip(ga) {
            *d += s;
        }
        for (d, &s) in grad_b.item_mut(n).iter_mut().zip(gb) {
            *d += s;
        }
    }
}

/// Activation functions used by the two networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu,
    /// Leaky ReLU with negative slope 0.1.
    LeakyRelu,
    Tanh,
    Exp,
    Sigmoid,
    /// Softmax across channels at every pixel.
    SoftmaxChannels,
}

pub const LEAKY_SLOPE: f64 = 0.1;

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu_0.1",
            Activation::Tanh => "tanh",
            Activation::Exp => "exp",
            Activation::Sigmoid => "sigmoid",
            Activation::SoftmaxChannels => "softmax_channels",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Activation::Linear,
            Activation::Relu,
            Activation::LeakyRelu,
            Activation::Tanh,
            Activation::Exp,
            Activation::Sigmoid,
            Activation::SoftmaxChannels,
        ]
        .into_iter()
        .find(|a| a.name() == s)
    }

    /// Applies the activation in place.
    pub fn apply<T: Scalar>(self, t: &mut Tensor4<T>) -> Result<()> {
        let slope = T::c(LEAKY_SLOPE);
        match self {
            Activation::Linear => {}
            Activation::Relu => t.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero())),
            Activation::LeakyRelu => t.data_mut().iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v *= slope
                }
            }),
            Activation::Tanh => t.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Exp => t.data_mut().iter_mut().for_each(|v| *v = v.exp()),
            Activation::Sigmoid => t
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::one() / (T::one() + (-*v).exp())),
            Activation::SoftmaxChannels => {
                let c = t.channels();
                if c < 2 {
                    return Err(Error::Shape("softmax over channels needs >= 2 channels".into()));
                }
                let plane = t.plane_len();
                for n in 0..t.batch() {
                    let item = t.item_mut(n);
                    for p in 0..plane {
                        let mut m = T::neg_infinity();
                        for ch in 0..c {
                            m = m.max(item[ch * plane + p]);
                        }
                        let mut s = T::zero();
                        for ch in 0..c {
                            let e = (item[ch * plane + p] - m).exp();
                            item[ch * plane + p] = e;
                            s += e;
                        }
                        for ch in 0..c {
                            item[ch * plane + p] /= s;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Converts `dL/doutput` into `dL/dinput` in place, given the forward
    /// *output* of the activation.
    pub fn backward_in_place<T: Scalar>(self, output: &Tensor4<T>, grad: &mut Tensor4<T>) {
        debug_assert_eq!(output.shape(), grad.shape());
        let slope = T::c(LEAKY_SLOPE);
        let out = output.data();
        let g = grad.data_mut();
        match self {
            Activation::Linear => {}
            Activation::Relu => {
                for (g, &y) in g.iter_mut().zip(out) {
                    if y <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            Activation::LeakyRelu => {
                for (g, &y) in g.iter_mut().zip(out) {
                    if y <= T::zero() {
                        *g *= slope;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &y) in g.iter_mut().zip(out) {
                    *g *= T::one() - y * y;
                }
            }
            Activation::Exp => {
                for (g, &y) in g.iter_mut().zip(out) {
                    *g *= y;
                }
            }
            Activation::Sigmoid => {
                for (g, &y) in g.iter_mut().zip(out) {
                    *g *= y * (T::one() - y);
                }
            }
            Activation::SoftmaxChannels => {
                let [nb, c, h, w] = output.shape();
                let plane = h * w;
                for n in 0..nb {
                    let base = n * c * plane;
                    for p in 0..plane {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let i = base + ch * plane + p;
                            dot += g[i] * out[i];
                        }
                        for ch in 0..c {
                            let i = base + ch * plane + p;
                            g[i] = out[i] * (g[i] - dot);
                        }
                    }
                }
            }
        }
    }
}

/// Forward activation returning a new tensor.
pub fn apply_activation<T: Scalar>(input: &Tensor4<T>, kind: Activation) -> Result<Tensor4<T>> {
    let mut out = input.clone();
    kind.apply(&mut out)?;
    Ok(out)
}
