//! Convolution kernels: pointwise (1x1), dense 3x3, depthwise 3x3 and the
//! per-channel affine used by the residual-adapter baseline.
//!
//! All 3x3 kernels are cross-correlations with zero padding 1. Strided
//! outputs use ceil division on the spatial dims.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Gradients produced by a convolution backward pass. Each field is present
/// only when it was requested.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn strided_dim(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::dim(op, format!("stride must be 1 or 2, got {stride}")))
    }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != c_out => Err(Error::dim(
            op,
            format!("bias has {} entries for {c_out} output channels", b.len()),
        )),
        _ => Ok(()),
    }
}

/// `(c, h, w)` plane set of one sample, subsampled at `stride`.
fn gather_strided<T: Element>(sample: &[T], c: usize, h: usize, w: usize, stride: usize) -> Cow<'_, [T]> {
    if stride == 1 {
        return Cow::Borrowed(sample);
    }
    let (ho, wo) = (strided_dim(h, stride), strided_dim(w, stride));
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &sample[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            let row = &plane[y * stride * w..];
            for x in 0..wo {
                out.push(row[x * stride]);
            }
        }
    }
    Cow::Owned(out)
}

/// Pointwise convolution. `weight` has shape `(c_out, c_in, 1, 1)`.
pub fn conv1x1_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    check_stride("conv1x1", stride)?;
    let s = input.shape();
    let ws = weight.shape();
    if ws.c != s.c || ws.h != 1 || ws.w != 1 {
        return Err(Error::dim(
            "conv1x1",
            format!("input has {} channels, weight is {ws}", s.c),
        ));
    }
    let c_out = ws.n;
    check_bias("conv1x1", bias, c_out)?;
    let (ho, wo) = (strided_dim(s.h, stride), strided_dim(s.w, stride));
    let plane = ho * wo;
    let mut out = Tensor::zeros(Shape::new(s.n, c_out, ho, wo));
    let w = weight.data();
    for n in 0..s.n {
        let xs = gather_strided(input.sample(n), s.c, s.h, s.w, stride);
        let dst = &mut out.data_mut()[n * c_out * plane..(n + 1) * c_out * plane];
        for o in 0..c_out {
            let acc = &mut dst[o * plane..(o + 1) * plane];
            if let Some(b) = bias {
                acc.fill(b.data()[o]);
            }
            for i in 0..s.c {
                let wv = w[o * s.c + i];
                let src = &xs[i * plane..(i + 1) * plane];
                for (a, &x) in acc.iter_mut().zip(src) {
                    *a = *a + wv * x;
                }
            }
        }
    }
    Ok(out)
}

pub fn conv1x1_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let c_out = ws.n;
    let (ho, wo) = (strided_dim(s.h, stride), strided_dim(s.w, stride));
    if grad_out.shape() != Shape::new(s.n, c_out, ho, wo) {
        return Err(Error::dim(
            "conv1x1 backward",
            format!("grad {} does not match output of {}", grad_out.shape(), s),
        ));
    }
    let plane = ho * wo;
    let w = weight.data();
    let mut gin = need_input.then(|| Tensor::zeros(s));
    let mut gw = need_params.then(|| vec![T::zero(); c_out * s.c]);
    let mut gb = (need_params && has_bias).then(|| vec![T::zero(); c_out]);

    let mut scratch = vec![T::zero(); plane];
    for n in 0..s.n {
        let g = grad_out.sample(n);
        if let Some(gw) = gw.as_mut() {
            let xs = gather_strided(input.sample(n), s.c, s.h, s.w, stride);
            for o in 0..c_out {
                let go = &g[o * plane..(o + 1) * plane];
                for i in 0..s.c {
                    let xi = &xs[i * plane..(i + 1) * plane];
                    let dot: T = go.iter().zip(xi).map(|(&a, &b)| a * b).sum();
                    gw[o * s.c + i] = gw[o * s.c + i] + dot;
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            for o in 0..c_out {
                let sum: T = g[o * plane..(o + 1) * plane].iter().copied().sum();
                gb[o] = gb[o] + sum;
            }
        }
        if let Some(gin) = gin.as_mut() {
            let sample_len = s.sample_len();
            let dst = &mut gin.data_mut()[n * sample_len..(n + 1) * sample_len];
            for i in 0..s.c {
                scratch.fill(T::zero());
                for o in 0..c_out {
                    let wv = w[o * s.c + i];
                    for (a, &gv) in scratch.iter_mut().zip(&g[o * plane..(o + 1) * plane]) {
                        *a = *a + wv * gv;
                    }
                }
                let plane_in = &mut dst[i * s.h * s.w..(i + 1) * s.h * s.w];
                if stride == 1 {
                    plane_in.copy_from_slice(&scratch);
                } else {
                    for y in 0..ho {
                        for x in 0..wo {
                            plane_in[y * stride * s.w + x * stride] = scratch[y * wo + x];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gw.map(|d| Tensor::from_vec(ws, d).unwrap()),
        bias: gb.map(Tensor::vector),
    })
}

/// Valid output-index range `[lo, hi)` along one axis for kernel tap `k`
/// (0..3), padding 1.
#[inline]
fn tap_range(k: usize, len_in: usize, len_out: usize, stride: usize) -> (usize, usize) {
    // input index = o * stride + k - 1 must lie in [0, len_in)
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = if len_in + 1 > k {
        ((len_in + 1 - k - 1) / stride + 1).min(len_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// out += k (*) inp for one plane, zero padding 1.
fn plane_forward<T: Element>(
    inp: &[T],
    h: usize,
    w: usize,
    kernel: &[T],
    out: &mut [T],
    ho: usize,
    wo: usize,
    stride: usize,
) {
    for ky in 0..3 {
        let (y0, y1) = tap_range(ky, h, ho, stride);
        for kx in 0..3 {
            let kv = kernel[ky * 3 + kx];
            let (x0, x1) = tap_range(kx, w, wo, stride);
            for y in y0..y1 {
                let iy = y * stride + ky - 1;
                let src = &inp[iy * w..(iy + 1) * w];
                let dst = &mut out[y * wo..(y + 1) * wo];
                for x in x0..x1 {
                    dst[x] = dst[x] + kv * src[x * stride + kx - 1];
                }
            }
        }
    }
}

/// gin += k^T (*) g for one plane.
fn plane_grad_input<T: Element>(
    g: &[T],
    ho: usize,
    wo: usize,
    kernel: &[T],
    gin: &mut [T],
    h: usize,
    w: usize,
    stride: usize,
) {
    for ky in 0..3 {
        let (y0, y1) = tap_range(ky, h, ho, stride);
        for kx in 0..3 {
            let kv = kernel[ky * 3 + kx];
            let (x0, x1) = tap_range(kx, w, wo, stride);
            for y in y0..y1 {
                let iy = y * stride + ky - 1;
                let src = &g[y * wo..(y + 1) * wo];
                let dst = &mut gin[iy * w..(iy + 1) * w];
                for x in x0..x1 {
                    let ix = x * stride + kx - 1;
                    dst[ix] = dst[ix] + kv * src[x];
                }
            }
        }
    }
}

/// gk += corr(inp, g) for one plane.
fn plane_grad_kernel<T: Element>(
    inp: &[T],
    h: usize,
    w: usize,
    g: &[T],
    ho: usize,
    wo: usize,
    gk: &mut [T],
    stride: usize,
) {
    for ky in 0..3 {
        let (y0, y1) = tap_range(ky, h, ho, stride);
        for kx in 0..3 {
            let (x0, x1) = tap_range(kx, w, wo, stride);
            let mut acc = T::zero();
            for y in y0..y1 {
                let iy = y * stride + ky - 1;
                let src = &inp[iy * w..(iy + 1) * w];
                let gr = &g[y * wo..(y + 1) * wo];
                for x in x0..x1 {
                    acc = acc + gr[x] * src[x * stride + kx - 1];
                }
            }
            gk[ky * 3 + kx] = gk[ky * 3 + kx] + acc;
        }
    }
}

/// 3x3 convolution. `depthwise` selects one kernel per channel (weight
/// `(c, 1, 3, 3)`) instead of a dense `(c_out, c_in, 3, 3)` weight.
fn conv3x3_generic<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    depthwise: bool,
) -> Result<Tensor<T>> {
    check_stride(op, stride)?;
    let s = input.shape();
    let ws = weight.shape();
    let c_in_per = if depthwise { 1 } else { s.c };
    if ws.h != 3 || ws.w != 3 || ws.c != c_in_per || (depthwise && ws.n != s.c) {
        return Err(Error::dim(
            op,
            format!("input has {} channels, weight is {ws}", s.c),
        ));
    }
    let c_out = ws.n;
    let (ho, wo) = (strided_dim(s.h, stride), strided_dim(s.w, stride));
    let (pin, pout) = (s.h * s.w, ho * wo);
    let mut out = Tensor::zeros(Shape::new(s.n, c_out, ho, wo));
    let w = weight.data();
    for n in 0..s.n {
        let x = input.sample(n);
        let dst = &mut out.data_mut()[n * c_out * pout..(n + 1) * c_out * pout];
        for o in 0..c_out {
            let acc = &mut dst[o * pout..(o + 1) * pout];
            if depthwise {
                plane_forward(&x[o * pin..(o + 1) * pin], s.h, s.w, &w[o * 9..o * 9 + 9], acc, ho, wo, stride);
            } else {
                for i in 0..s.c {
                    let k = &w[(o * s.c + i) * 9..(o * s.c + i) * 9 + 9];
                    plane_forward(&x[i * pin..(i + 1) * pin], s.h, s.w, k, acc, ho, wo, stride);
                }
            }
        }
    }
    Ok(out)
}

fn conv3x3_generic_backward<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    depthwise: bool,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let c_out = ws.n;
    let (ho, wo) = (strided_dim(s.h, stride), strided_dim(s.w, stride));
    if grad_out.shape() != Shape::new(s.n, c_out, ho, wo) {
        return Err(Error::dim(
            op,
            format!("grad {} does not match output of {}", grad_out.shape(), s),
        ));
    }
    let (pin, pout) = (s.h * s.w, ho * wo);
    let w = weight.data();
    let mut gin = need_input.then(|| Tensor::zeros(s));
    let mut gw = need_params.then(|| vec![T::zero(); ws.len()]);
    for n in 0..s.n {
        let x = input.sample(n);
        let g = grad_out.sample(n);
        for o in 0..c_out {
            let go = &g[o * pout..(o + 1) * pout];
            let inputs: Box<dyn Iterator<Item = (usize, usize)>> = if depthwise {
                Box::new(std::iter::once((o, o * 9)))
            } else {
                Box::new((0..s.c).map(move |i| (i, (o * s.c + i) * 9)))
            };
            for (i, k_off) in inputs {
                if let Some(gw) = gw.as_mut() {
                    plane_grad_kernel(&x[i * pin..(i + 1) * pin], s.h, s.w, go, ho, wo, &mut gw[k_off..k_off + 9], stride);
                }
                if let Some(gin) = gin.as_mut() {
                    let base = n * s.sample_len() + i * pin;
                    let dst = &mut gin.data_mut()[base..base + pin];
                    plane_grad_input(go, ho, wo, &w[k_off..k_off + 9], dst, s.h, s.w, stride);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gw.map(|d| Tensor::from_vec(ws, d).unwrap()),
        bias: None,
    })
}

/// Dense 3x3 convolution, weight `(c_out, c_in, 3, 3)`.
pub fn conv3x3_forward<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    conv3x3_generic("conv3x3", input, weight, stride, false)
}

pub fn conv3x3_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    conv3x3_generic_backward("conv3x3 backward", input, weight, grad_out, stride, false, need_input, need_params)
}

/// Depthwise 3x3 convolution, weight `(c, 1, 3, 3)`.
pub fn depthwise3x3_forward<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    conv3x3_generic("depthwise3x3", input, weight, stride, true)
}

pub fn depthwise3x3_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    conv3x3_generic_backward("depthwise3x3 backward", input, weight, grad_out, stride, true, need_input, need_params)
}

/// Per-channel `scale * x + bias`, subsampled at `stride`. A diagonal 1x1
/// convolution.
pub fn channel_scale_forward<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    check_stride("channel_scale", stride)?;
    let s = input.shape();
    if scale.len() != s.c || bias.len() != s.c {
        return Err(Error::dim(
            "channel_scale",
            format!("{} channels, scale {} bias {}", s.c, scale.len(), bias.len()),
        ));
    }
    let (ho, wo) = (strided_dim(s.h, stride), strided_dim(s.w, stride));
    let plane = ho * wo;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    for n in 0..s.n {
        let xs = gather_strided(input.sample(n), s.c, s.h, s.w, stride);
        let dst = &mut out.data_mut()[n * s.c * plane..(n + 1) * s.c * plane];
        for c in 0..s.c {
            let (a, b) = (scale.data()[c], bias.data()[c]);
            for (d, &x) in dst[c * plane..(c + 1) * plane].iter_mut().zip(&xs[c * plane..(c + 1) * plane]) {
                *d = a * x + b;
            }
        }
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let (ho, wo) = (strided_dim(s.h, stride), strided_dim(s.w, stride));
    if grad_out.shape() != Shape::new(s.n, s.c, ho, wo) {
        return Err(Error::dim(
            "channel_scale backward",
            format!("grad {} does not match output of {}", grad_out.shape(), s),
        ));
    }
    let plane = ho * wo;
    let mut gin = need_input.then(|| Tensor::zeros(s));
    let mut gs = need_params.then(|| vec![T::zero(); s.c]);
    let mut gb = need_params.then(|| vec![T::zero(); s.c]);
    for n in 0..s.n {
        let g = grad_out.sample(n);
        if let (Some(gs), Some(gb)) = (gs.as_mut(), gb.as_mut()) {
            let xs = gather_strided(input.sample(n), s.c, s.h, s.w, stride);
            for c in 0..s.c {
                let gc = &g[c * plane..(c + 1) * plane];
                let dot: T = gc.iter().zip(&xs[c * plane..(c + 1) * plane]).map(|(&a, &b)| a * b).sum();
                gs[c] = gs[c] + dot;
                gb[c] = gb[c] + gc.iter().copied().sum();
            }
        }
        if let Some(gin) = gin.as_mut() {
            for c in 0..s.c {
                let a = scale.data()[c];
                for y in 0..ho {
                    for x in 0..wo {
                        let idx = gin.index(n, c, y * stride, x * stride);
                        gin.data_mut()[idx] = a * g[c * plane + y * wo + x];
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gs.map(Tensor::vector),
        bias: gb.map(Tensor::vector),
    })
}
