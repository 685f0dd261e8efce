//! Forward and backward kernels on raw tensors.
//!
//! Every kernel accumulates each output element in a fixed sequential order.
//! Parallel loops only ever split the work over independent output planes,
//! so results are bit-identical whatever the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Stride, zero padding and channel grouping of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dParams {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams::new(1, 0, 1)
    }
}

pub fn conv_out_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|d| d / stride + 1)
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    p: Conv2dParams,
}

impl ConvGeometry {
    fn new(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: Conv2dParams) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = x.dims4(OP)?;
        let [cout, cin_g, kh, kw] = weight.dims4(OP)?;
        if p.groups == 0 || p.stride.0 == 0 || p.stride.1 == 0 {
            return Err(Error::arg(OP, "groups and strides must be positive"));
        }
        if cin % p.groups != 0 {
            return Err(Error::shape(
                OP,
                "input channels",
                format!("{cin} input channels not divisible by {} groups", p.groups),
            ));
        }
        if cout % p.groups != 0 {
            return Err(Error::shape(
                OP,
                "output channels",
                format!("{cout} output channels not divisible by {} groups", p.groups),
            ));
        }
        if cin_g != cin / p.groups {
            return Err(Error::shape(
                OP,
                "weight input channels",
                format!("weight expects {cin_g} channels per group, input provides {}", cin / p.groups),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    OP,
                    "bias",
                    format!("bias shape {:?}, expected [{cout}]", b.shape()),
                ));
            }
        }
        let ho = conv_out_extent(h, p.padding.0, kh, p.stride.0).ok_or_else(|| {
            Error::shape(OP, "height", format!("padded height {} < kernel {kh}", h + 2 * p.padding.0))
        })?;
        let wo = conv_out_extent(w, p.padding.1, kw, p.stride.1).ok_or_else(|| {
            Error::shape(OP, "width", format!("padded width {} < kernel {kw}", w + 2 * p.padding.1))
        })?;
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / p.groups,
            kh,
            kw,
            ho,
            wo,
            p,
        })
    }

    /// Output indices along one axis whose input tap `o*stride + k - pad` lands in `[0, len)`.
    fn valid(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if len + pad > k {
            (len + pad - k).div_ceil(stride).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: Conv2dParams,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x, weight, bias, p)?;
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.cout * plane];
    let (xd, wd) = (x.data(), weight.data());
    let (sh, sw) = g.p.stride;
    let (ph, pw) = g.p.padding;

    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, oc) = (idx / g.cout, idx % g.cout);
        let group = oc / g.cout_g;
        if let Some(b) = bias {
            dst.fill(b.data()[oc]);
        }
        for icg in 0..g.cin_g {
            let ic = group * g.cin_g + icg;
            let src = &xd[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                let rows = ConvGeometry::valid(g.ho, g.h, ki, sh, ph);
                for kj in 0..g.kw {
                    let wv = wd[((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj];
                    let cols = ConvGeometry::valid(g.wo, g.w, kj, sw, pw);
                    for oh in rows.clone() {
                        let ih = oh * sh + ki - ph;
                        let row = &src[ih * g.w..];
                        let drow = &mut dst[oh * g.wo..];
                        for ow in cols.clone() {
                            drow[ow] += wv * row[ow * sw + kj - pw];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    p: Conv2dParams,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x, weight, None, p)?;
    let plane = g.ho * g.wo;
    let (gd, xd, wd) = (grad_out.data(), x.data(), weight.data());
    let (sh, sw) = g.p.stride;
    let (ph, pw) = g.p.padding;

    let input = need[0].then(|| {
        let mut gi = vec![0.0; x.numel()];
        gi.par_chunks_mut(g.h * g.w).enumerate().for_each(|(idx, dst)| {
            let (n, ic) = (idx / g.cin, idx % g.cin);
            let group = ic / g.cin_g;
            let icg = ic % g.cin_g;
            for ocg in 0..g.cout_g {
                let oc = group * g.cout_g + ocg;
                let go = &gd[(n * g.cout + oc) * plane..][..plane];
                for ki in 0..g.kh {
                    let rows = ConvGeometry::valid(g.ho, g.h, ki, sh, ph);
                    for kj in 0..g.kw {
                        let wv = wd[((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj];
                        let cols = ConvGeometry::valid(g.wo, g.w, kj, sw, pw);
                        for oh in rows.clone() {
                            let ih = oh * sh + ki - ph;
                            let grow = &go[oh * g.wo..];
                            let drow = &mut dst[ih * g.w..];
                            for ow in cols.clone() {
                                drow[ow * sw + kj - pw] += wv * grow[ow];
                            }
                        }
                    }
                }
            }
        });
        Tensor::new(x.shape(), gi)
    });

    let weight_grad = need[1].then(|| {
        let per_oc = g.cin_g * g.kh * g.kw;
        let mut gw = vec![0.0; weight.numel()];
        gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dst)| {
            let group = oc / g.cout_g;
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                for ki in 0..g.kh {
                    let rows = ConvGeometry::valid(g.ho, g.h, ki, sh, ph);
                    for kj in 0..g.kw {
                        let cols = ConvGeometry::valid(g.wo, g.w, kj, sw, pw);
                        let mut acc = 0.0;
                        for n in 0..g.n {
                            let go = &gd[(n * g.cout + oc) * plane..][..plane];
                            let src = &xd[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                            for oh in rows.clone() {
                                let ih = oh * sh + ki - ph;
                                let row = &src[ih * g.w..];
                                let grow = &go[oh * g.wo..];
                                for ow in cols.clone() {
                                    acc += grow[ow] * row[ow * sw + kj - pw];
                                }
                            }
                        }
                        dst[(icg * g.kh + ki) * g.kw + kj] = acc;
                    }
                }
            }
        });
        Tensor::new(weight.shape(), gw)
    });

    let bias = (has_bias && need[2]).then(|| {
        let gb = (0..g.cout)
            .map(|oc| {
                (0..g.n)
                    .map(|n| gd[(n * g.cout + oc) * plane..][..plane].iter().sum::<f64>())
                    .sum()
            })
            .collect();
        Tensor::new(&[g.cout], gb)
    });

    Ok(ConvGrads {
        input: input.transpose()?,
        weight: weight_grad.transpose()?,
        bias: bias.transpose()?,
    })
}

/// Max pooling without padding. Returns the output and, per output cell, the
/// flat input index of the first maximum in row-major window order.
pub fn maxpool2d_forward(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    let [n, c, h, w] = x.dims4(OP)?;
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::arg(OP, "kernel and stride must be positive"));
    }
    let ho = conv_out_extent(h, 0, kernel.0, stride.0)
        .ok_or_else(|| Error::shape(OP, "height", format!("height {h} < kernel {}", kernel.0)))?;
    let wo = conv_out_extent(w, 0, kernel.1, stride.1)
        .ok_or_else(|| Error::shape(OP, "width", format!("width {w} < kernel {}", kernel.1)))?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * stride.0 * w + ow * stride.1;
                for ki in 0..kernel.0 {
                    for kj in 0..kernel.1 {
                        let idx = base + (oh * stride.0 + ki) * w + ow * stride.1 + kj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, argmax))
}

pub fn maxpool2d_backward(grad_out: &Tensor, input_shape: &[usize], argmax: &[usize]) -> Tensor {
    let mut gi = Tensor::zeros(input_shape);
    let gd = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    gi
}

pub fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    const OP: &str = "upsample_nearest";
    let [n, c, h, w] = x.dims4(OP)?;
    if factor == 0 {
        return Err(Error::arg(OP, "factor must be positive"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        for oh in 0..ho {
            let row = &xd[(nc * h + oh / factor) * w..][..w];
            out.extend((0..wo).map(|ow| row[ow / factor]));
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn upsample_nearest_backward(grad_out: &Tensor, input_shape: &[usize], factor: usize) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let wo = w * factor;
    let mut gi = Tensor::zeros(input_shape);
    let gd = grad_out.data();
    let out = gi.data_mut();
    for nc in 0..input_shape[0] * input_shape[1] {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for a in 0..factor {
                    let row = &gd[(nc * h * factor + i * factor + a) * wo..];
                    for b in 0..factor {
                        acc += row[j * factor + b];
                    }
                }
                out[(nc * h + i) * w + j] = acc;
            }
        }
    }
    gi
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let hw = h * w;
    let out = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(grad_out.numel() * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::new(input_shape, data).expect("shape preserved")
}

pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear";
    let (n, f) = match x.shape() {
        &[n, f] => (n, f),
        s => return Err(Error::shape(OP, "rank", format!("input must be [N, F], got {s:?}"))),
    };
    let o = match weight.shape() {
        &[o, wf] if wf == f => o,
        s => {
            return Err(Error::shape(
                OP,
                "inner",
                format!("weight {s:?} incompatible with {f} input features"),
            ))
        }
    };
    if bias.shape() != [o] {
        return Err(Error::shape(OP, "bias", format!("bias {:?}, expected [{o}]", bias.shape())));
    }
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * o);
    for row in xd.chunks(f) {
        for (oi, wrow) in wd.chunks(f).enumerate() {
            out.push(row.iter().zip(wrow).fold(bd[oi], |acc, (a, b)| acc + a * b));
        }
    }
    Tensor::new(&[n, o], out)
}

pub fn linear_backward(
    grad_out: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    need: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = weight.shape()[0];
    let (gd, xd, wd) = (grad_out.data(), x.data(), weight.data());
    let gx = need[0].then(|| {
        Tensor::from_fn(&[n, f], |idx| {
            let (r, c) = (idx / f, idx % f);
            (0..o).map(|oi| gd[r * o + oi] * wd[oi * f + c]).sum()
        })
    });
    let gw = need[1].then(|| {
        Tensor::from_fn(&[o, f], |idx| {
            let (oi, c) = (idx / f, idx % f);
            (0..n).map(|r| gd[r * o + oi] * xd[r * f + c]).sum()
        })
    });
    let gb = need[2].then(|| Tensor::from_fn(&[o], |oi| (0..n).map(|r| gd[r * o + oi]).sum()));
    (gx, gw, gb)
}

/// Normalized activations and per-channel statistics of a batch-norm forward.
pub struct NormStats {
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn channel_vec(t: &Tensor, c: usize, op: &'static str, what: &'static str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(op, what, format!("{:?}, expected [{c}]", t.shape())));
    }
    Ok(())
}

pub fn batch_norm_stats(x: &Tensor, eps: f64) -> Result<NormStats> {
    let [n, c, h, w] = x.dims4("batch_norm")?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += xd[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += xd[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    Ok(normalize(x, mean, var, eps))
}

pub fn normalize(x: &Tensor, mean: Vec<f64>, var: Vec<f64>, eps: f64) -> NormStats {
    let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xhat = Tensor::from_fn(x.shape(), |i| {
        let ch = (i / hw) % c;
        (x.data()[i] - mean[ch]) * inv_std[ch]
    });
    NormStats {
        xhat,
        mean,
        var,
        inv_std,
    }
}

pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor, op: &'static str) -> Result<Tensor> {
    let [_, c, h, w] = x.dims4(op)?;
    channel_vec(scale, c, op, "scale")?;
    channel_vec(shift, c, op, "shift")?;
    let hw = h * w;
    let (s, b) = (scale.data(), shift.data());
    Ok(Tensor::from_fn(x.shape(), |i| {
        let ch = (i / hw) % c;
        x.data()[i] * s[ch] + b[ch]
    }))
}

/// Per-channel reduction `sum over N, H, W of f(i)`.
pub fn channel_sum(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    Tensor::from_fn(&[c], |ch| {
        let mut acc = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                acc += f(i);
            }
        }
        acc
    })
}

pub fn batch_norm_train_backward(grad_out: &Tensor, gamma: &Tensor, stats: &NormStats) -> Tensor {
    let shape = grad_out.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f64;
    let (gd, xh, gm) = (grad_out.data(), stats.xhat.data(), gamma.data());
    let sum_dxhat = channel_sum(shape, |i| gd[i] * gm[(i / hw) % c]);
    let sum_dxhat_xhat = channel_sum(shape, |i| gd[i] * gm[(i / hw) % c] * xh[i]);
    Tensor::from_fn(shape, |i| {
        let ch = (i / hw) % c;
        let dxhat = gd[i] * gm[ch];
        stats.inv_std[ch] / m
            * (m * dxhat - sum_dxhat.data()[ch] - xh[i] * sum_dxhat_xhat.data()[ch])
    })
}

pub fn pad_bottom_right(x: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("pad")?;
    let (ho, wo) = (h + pad_h, w + pad_w);
    let mut out = vec![0.0; n * c * ho * wo];
    for nc in 0..n * c {
        for i in 0..h {
            out[(nc * ho + i) * wo..][..w].copy_from_slice(&x.data()[(nc * h + i) * w..][..w]);
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Reflection padding by `pad` on every side (edge pixel not repeated).
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("reflect_pad")?;
    if pad >= h || pad >= w {
        return Err(Error::shape("reflect_pad", "spatial", format!("{h}x{w} too small to reflect by {pad}")));
    }
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        for i in 0..ho {
            let row = &x.data()[(nc * h + reflect(i as isize - pad as isize, h)) * w..][..w];
            out.extend((0..wo).map(|j| row[reflect(j as isize - pad as isize, w)]));
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn reflect_pad_backward(grad_out: &Tensor, input_shape: &[usize], pad: usize) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let mut gi = Tensor::zeros(input_shape);
    let out = gi.data_mut();
    for nc in 0..input_shape[0] * input_shape[1] {
        for i in 0..ho {
            let ri = reflect(i as isize - pad as isize, h);
            for j in 0..wo {
                let rj = reflect(j as isize - pad as isize, w);
                out[(nc * h + ri) * w + rj] += grad_out.data()[(nc * ho + i) * wo + j];
            }
        }
    }
    gi
}

/// Keeps the top-left `h × w` window.
pub fn crop_top_left(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, hi, wi] = x.dims4("crop")?;
    if h > hi || w > wi || h == 0 || w == 0 {
        return Err(Error::shape("crop", "spatial", format!("cannot crop {hi}x{wi} to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for nc in 0..n * c {
        for i in 0..h {
            out.extend_from_slice(&x.data()[(nc * hi + i) * wi..][..w]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    const OP: &str = "concat";
    let first = xs.first().ok_or_else(|| Error::arg(OP, "nothing to concatenate"))?;
    let [n, _, h, w] = first.dims4(OP)?;
    let mut c_total = 0;
    for x in xs {
        let [xn, xc, xh, xw] = x.dims4(OP)?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::shape(
                OP,
                "batch/spatial",
                format!("{:?} vs {:?}", x.shape(), first.shape()),
            ));
        }
        c_total += xc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c_total * hw);
    for b in 0..n {
        for x in xs {
            let c = x.shape()[1];
            out.extend_from_slice(&x.data()[b * c * hw..][..c * hw]);
        }
    }
    Tensor::new(&[n, c_total, h, w], out)
}

pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let (n, c_total, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2], grad.shape()[3]);
    let hw = h * w;
    let mut offset = 0;
    channels
        .iter()
        .map(|&c| {
            let mut data = Vec::with_capacity(n * c * hw);
            for b in 0..n {
                data.extend_from_slice(&grad.data()[(b * c_total + offset) * hw..][..c * hw]);
            }
            offset += c;
            Tensor::new(&[n, c, h, w], data).expect("split shape")
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(z, 0) - z*y + ln(1 + e^-|z|)`, the numerically stable BCE on a logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
