//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure. The tape in [`super::graph`] strings them
//! together; tests call them directly.

use super::tensor::{expect_rank, Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Range of output positions `o` whose input tap `o*stride + k - pad`
/// falls inside `[0, in_len)`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", weight, 4)?;
    let (batch, cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (cout, wcin, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let ho = conv_out_len(h, kh, stride, padding);
    let wo = conv_out_len(w, kw, stride, padding);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvDims {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
        )),
    }
}

/// 2-D cross-correlation over a batch: `[B,Cin,H,W] * [Cout,Cin,kh,kw] -> [B,Cout,H',W']`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, weight, stride, padding)?;
    if bias.shape() != [d.cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected [{}]", bias.shape(), d.cout),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let mut out = vec![T::zero(); d.batch * d.cout * plane_out];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let o_base = (b * d.cout + co) * plane_out;
            let o = &mut out[o_base..o_base + plane_out];
            o.fill(bias.data()[co]);
            for ci in 0..d.cin {
                let xin = &x[(b * d.cin + ci) * plane_in..(b * d.cin + ci + 1) * plane_in];
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, padding, stride, d.h, d.ho);
                    for kx in 0..d.kw {
                        let wv = wt[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, padding, stride, d.w, d.wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let row = &xin[iy * d.w..(iy + 1) * d.w];
                            let orow = &mut o[oy * d.wo..(oy + 1) * d.wo];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.batch, d.cout, d.ho, d.wo], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv_dims(input, weight, stride, padding)?;
    if grad_out.shape() != [d.batch, d.cout, d.ho, d.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient shape {:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); d.cout];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let go = &g[(b * d.cout + co) * plane_out..(b * d.cout + co + 1) * plane_out];
            gb[co] += go.iter().copied().sum::<T>();
            for ci in 0..d.cin {
                let in_base = (b * d.cin + ci) * plane_in;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, padding, stride, d.h, d.ho);
                    for kx in 0..d.kw {
                        let widx = ((co * d.cin + ci) * d.kh + ky) * d.kw + kx;
                        let wv = wt[widx];
                        let (ox_lo, ox_hi) = valid_range(kx, padding, stride, d.w, d.wo);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let row = in_base + iy * d.w;
                            let grow = &go[oy * d.wo..(oy + 1) * d.wo];
                            for ox in ox_lo..ox_hi {
                                let ix = row + ox * stride + kx - padding;
                                acc += grow[ox] * x[ix];
                                gx[ix] += grow[ox] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![d.cout], gb),
    ))
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
    }
}

/// Backward of [`activation`], expressed through its output `y`.
pub fn activation_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Sigmoid => y.zip_map(grad_out, |y, g| g * y * (T::one() - y)),
        Activation::Tanh => y.zip_map(grad_out, |y, g| g * (T::one() - y * y)),
        Activation::Relu => y.zip_map(grad_out, |y, g| if y > T::zero() { g } else { T::zero() }),
    }
}

/// Spatial mean per channel: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("global_avg_pool", x, 4)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let plane = h * w;
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], data))
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::lit(plane as f64);
    let mut data = Vec::with_capacity(grad_out.len() * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g * inv).take(plane));
    }
    Tensor::from_parts(input_shape.to_vec(), data)
}

/// Running statistics of a batch normalization layer. Passed in and out
/// explicitly; the layer itself holds no hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(vec![features]),
            var: Tensor::full(vec![features], T::one()),
        }
    }
}

/// Saved forward quantities needed by [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: NormMode,
}

/// Batch normalization over `[B,F]`.
///
/// In train mode the batch statistics normalize the input and are blended
/// into `stats` with momentum [`BN_MOMENTUM`] (unbiased variance); in eval
/// mode `stats` normalize and stay untouched.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: NormMode,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    expect_rank("batch_norm", x, 2)?;
    let (b, f) = (x.shape()[0], x.shape()[1]);
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", &stats.mean),
        ("running var", &stats.var),
    ] {
        if t.shape() != [f] {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} shape {:?}, expected [{f}]", t.shape()),
            ));
        }
    }
    let xs = x.data();
    let (mean, var) = match mode {
        NormMode::Train => {
            if b < 2 {
                return Err(Error::InvalidArgument(format!(
                    "batch_norm in train mode needs a batch of at least 2, got {b}"
                )));
            }
            let bn = T::lit(b as f64);
            let mut mean = vec![T::zero(); f];
            let mut var = vec![T::zero(); f];
            for row in xs.chunks_exact(f) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / bn);
            for row in xs.chunks_exact(f) {
                for j in 0..f {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / bn);
            let m = T::lit(BN_MOMENTUM);
            let unbias = bn / (bn - T::one());
            for j in 0..f {
                let rm = &mut stats.mean.data_mut()[j];
                *rm = (T::one() - m) * *rm + m * mean[j];
                let rv = &mut stats.var.data_mut()[j];
                *rv = (T::one() - m) * *rv + m * var[j] * unbias;
            }
            (mean, var)
        }
        NormMode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(xs.len());
    let mut y = Vec::with_capacity(xs.len());
    for row in xs.chunks_exact(f) {
        for j in 0..f {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat.push(h);
            y.push(gamma.data()[j] * h + beta.data()[j]);
        }
    }
    Ok((
        Tensor::from_parts(vec![b, f], y),
        BatchNormCache {
            xhat: Tensor::from_parts(vec![b, f], xhat),
            inv_std,
            mode,
        },
    ))
}

/// Gradients of [`batch_norm`] with respect to input, gamma and beta.
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, f) = (grad_out.shape()[0], grad_out.shape()[1]);
    let g = grad_out.data();
    let xh = cache.xhat.data();
    let mut ggamma = vec![T::zero(); f];
    let mut gbeta = vec![T::zero(); f];
    for i in 0..b {
        for j in 0..f {
            ggamma[j] += g[i * f + j] * xh[i * f + j];
            gbeta[j] += g[i * f + j];
        }
    }
    let mut gx = vec![T::zero(); b * f];
    match cache.mode {
        NormMode::Train => {
            let bn = T::lit(b as f64);
            for i in 0..b {
                for j in 0..f {
                    let k = i * f + j;
                    gx[k] = gamma.data()[j] * cache.inv_std[j] / bn
                        * (bn * g[k] - gbeta[j] - xh[k] * ggamma[j]);
                }
            }
        }
        NormMode::Eval => {
            for i in 0..b {
                for j in 0..f {
                    let k = i * f + j;
                    gx[k] = g[k] * gamma.data()[j] * cache.inv_std[j];
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![b, f], gx),
        Tensor::from_parts(vec![f], ggamma),
        Tensor::from_parts(vec![f], gbeta),
    )
}

/// `x · weightᵀ + bias` for `x: [B,F]`, `weight: [N,F]`, `bias: [N]`.
pub fn affine<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("affine", x, 2)?;
    expect_rank("affine", weight, 2)?;
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let n = weight.shape()[0];
    if weight.shape()[1] != f || bias.shape() != [n] {
        return Err(Error::shape(
            "affine",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(b * n);
    for row in x.data().chunks_exact(f) {
        for (o, wrow) in weight.data().chunks_exact(f).enumerate() {
            let dot: T = row.iter().zip(wrow).map(|(&a, &w)| a * w).sum();
            out.push(dot + bias.data()[o]);
        }
    }
    Ok(Tensor::from_parts(vec![b, n], out))
}

pub fn affine_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let n = weight.shape()[0];
    let g = grad_out.data();
    let mut gx = vec![T::zero(); b * f];
    let mut gw = vec![T::zero(); n * f];
    let mut gb = vec![T::zero(); n];
    for i in 0..b {
        let xrow = &x.data()[i * f..(i + 1) * f];
        for o in 0..n {
            let go = g[i * n + o];
            gb[o] += go;
            let wrow = &weight.data()[o * f..(o + 1) * f];
            for j in 0..f {
                gx[i * f + j] += go * wrow[j];
                gw[o * f + j] += go * xrow[j];
            }
        }
    }
    (
        Tensor::from_parts(vec![b, f], gx),
        Tensor::from_parts(vec![n, f], gw),
        Tensor::from_parts(vec![n], gb),
    )
}

/// Per-channel `scale * x + shift` over `[B,C,H,W]`.
pub fn channel_affine<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("channel_affine", x, 4)?;
    let c = x.shape()[1];
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "channel_affine",
            format!("{c} channels vs scale {:?} shift {:?}", scale.shape(), shift.shape()),
        ));
    }
    let plane = x.shape()[2] * x.shape()[3];
    let mut out = x.data().to_vec();
    for (idx, p) in out.chunks_exact_mut(plane).enumerate() {
        let ch = idx % c;
        let (s, t) = (scale.data()[ch], shift.data()[ch]);
        p.iter_mut().for_each(|v| *v = s * *v + t);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn channel_affine_backward<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.shape()[1];
    let plane = x.shape()[2] * x.shape()[3];
    let mut gx = grad_out.data().to_vec();
    let mut gs = vec![T::zero(); c];
    let mut gt = vec![T::zero(); c];
    for (idx, (gp, xp)) in gx
        .chunks_exact_mut(plane)
        .zip(x.data().chunks_exact(plane))
        .enumerate()
    {
        let ch = idx % c;
        for (g, &xv) in gp.iter_mut().zip(xp) {
            gs[ch] += *g * xv;
            gt[ch] += *g;
            *g *= scale.data()[ch];
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], gs),
        Tensor::from_parts(vec![c], gt),
    )
}

/// Concatenates `[B,C1,H,W]` and `[B,C2,H,W]` into `[B,C1+C2,H,W]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("concat_channels", a, 4)?;
    expect_rank("concat_channels", b, 4)?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
    }
    let plane = sa[2] * sa[3];
    let (na, nb) = (sa[1] * plane, sb[1] * plane);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..sa[0] {
        out.extend_from_slice(&a.data()[i * na..(i + 1) * na]);
        out.extend_from_slice(&b.data()[i * nb..(i + 1) * nb]);
    }
    Ok(Tensor::from_parts(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], out))
}

pub fn split_channels<T: Real>(g: &Tensor<T>, c1: usize) -> (Tensor<T>, Tensor<T>) {
    let s = g.shape();
    let plane = s[2] * s[3];
    let c2 = s[1] - c1;
    let mut a = Vec::with_capacity(s[0] * c1 * plane);
    let mut b = Vec::with_capacity(s[0] * c2 * plane);
    for chunk in g.data().chunks_exact(s[1] * plane) {
        a.extend_from_slice(&chunk[..c1 * plane]);
        b.extend_from_slice(&chunk[c1 * plane..]);
    }
    (
        Tensor::from_parts(vec![s[0], c1, s[2], s[3]], a),
        Tensor::from_parts(vec![s[0], c2, s[2], s[3]], b),
    )
}

/// Stacks `P` tensors of shape `[B, rest..]` into `[B, P, rest..]`.
pub fn stack_axis1<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
    if first.ndim() == 0 {
        return Err(Error::shape("stack_axis1", "scalar parts"));
    }
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::shape(
                "stack_axis1",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
    }
    let b = first.shape()[0];
    let inner = first.len() / b.max(1);
    let mut out = Vec::with_capacity(first.len() * parts.len());
    for i in 0..b {
        for p in parts {
            out.extend_from_slice(&p.data()[i * inner..(i + 1) * inner]);
        }
    }
    let mut shape = vec![b, parts.len()];
    shape.extend_from_slice(&first.shape()[1..]);
    Ok(Tensor::from_parts(shape, out))
}

pub fn unstack_axis1<T: Real>(g: &Tensor<T>) -> Vec<Tensor<T>> {
    let (b, p) = (g.shape()[0], g.shape()[1]);
    let inner: usize = g.shape()[2..].iter().product();
    let mut shape = vec![b];
    shape.extend_from_slice(&g.shape()[2..]);
    (0..p)
        .map(|k| {
            let mut data = Vec::with_capacity(b * inner);
            for i in 0..b {
                let base = (i * p + k) * inner;
                data.extend_from_slice(&g.data()[base..base + inner]);
            }
            Tensor::from_parts(shape.clone(), data)
        })
        .collect()
}
