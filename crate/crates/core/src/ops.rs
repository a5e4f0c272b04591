//! Forward kernels and their vector-Jacobian products.
//!
//! Every forward here is a pure function of its inputs. The matching
//! `*_backward` takes the upstream gradient and returns gradients for each
//! differentiable input; [`crate::tape::Tape`] wires them together.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn expect_vector(op: &'static str, what: &str, t: &Tensor, len: usize) -> Result<()> {
    let s = t.shape();
    if (s.n, s.c, s.h) != (1, 1, 1) || s.w != len {
        return Err(Error::shape(
            op,
            format!("{what} must be a vector of length {len}, got {s}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// linear (1x1 convolution over the channel axis)

/// `out[n,d,y,x] = Σ_c x[n,c,y,x]·W[c,d] + b[d]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    if (ws.n, ws.c) != (1, 1) || ws.h != xs.c {
        return Err(Error::shape(
            "linear",
            format!("input {xs} does not match weight {ws} (expected 1x1x{}xD)", xs.c),
        ));
    }
    let (cin, cout, p) = (ws.h, ws.w, xs.plane());
    if let Some(b) = bias {
        expect_vector("linear", "bias", b, cout)?;
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, xs.h, xs.w));
    let w = weight.data();
    let xd = x.data();
    let od = out.data_mut();
    for n in 0..xs.n {
        for d in 0..cout {
            let dst = &mut od[(n * cout + d) * p..(n * cout + d + 1) * p];
            if let Some(b) = bias {
                dst.fill(b.data()[d]);
            }
            for c in 0..cin {
                let coef = w[c * cout + d];
                let src = &xd[(n * cin + c) * p..(n * cin + c + 1) * p];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v * coef;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let (cin, cout, p) = (weight.shape().h, weight.shape().w, xs.plane());
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape::vector(cout));
    let (w, xd, gyd) = (weight.data(), x.data(), gy.data());
    for n in 0..xs.n {
        for d in 0..cout {
            let g = &gyd[(n * cout + d) * p..(n * cout + d + 1) * p];
            gb.data_mut()[d] += g.iter().sum::<f64>();
            for c in 0..cin {
                let src = &xd[(n * cin + c) * p..(n * cin + c + 1) * p];
                gw.data_mut()[c * cout + d] += src.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                let coef = w[c * cout + d];
                let gxd = &mut gx.data_mut()[(n * cin + c) * p..(n * cin + c + 1) * p];
                for (o, &v) in gxd.iter_mut().zip(g) {
                    *o += v * coef;
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups,
        }
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_geometry(x: Shape, weight: Shape, spec: ConvSpec) -> Result<ConvGeom> {
    let g = spec.groups;
    if g == 0 || spec.stride == 0 {
        return Err(Error::geometry("conv2d", "stride and groups must be >= 1"));
    }
    if !x.c.is_multiple_of(g) || !weight.n.is_multiple_of(g) {
        return Err(Error::geometry(
            "conv2d",
            format!("channels in={} out={} not divisible by groups={g}", x.c, weight.n),
        ));
    }
    if weight.c != x.c / g {
        return Err(Error::shape(
            "conv2d",
            format!("weight {weight} expects {} input channels per group, input {x}", weight.c),
        ));
    }
    let (ph, pw) = (x.h + 2 * spec.padding, x.w + 2 * spec.padding);
    if ph < weight.h || pw < weight.w {
        return Err(Error::geometry(
            "conv2d",
            format!("kernel {}x{} larger than padded input {ph}x{pw}", weight.h, weight.w),
        ));
    }
    Ok(ConvGeom {
        n: x.n,
        cin: x.c,
        cout: weight.n,
        h: x.h,
        w: x.w,
        kh: weight.h,
        kw: weight.w,
        oh: (ph - weight.h) / spec.stride + 1,
        ow: (pw - weight.w) / spec.stride + 1,
        cin_g: x.c / g,
        cout_g: weight.n / g,
    })
}

/// Visit every `(input index, output index, weight index)` triple of a
/// grouped cross-correlation; out-of-bounds (padding) taps are skipped.
fn conv_for_each(geo: &ConvGeom, spec: ConvSpec, mut f: impl FnMut(usize, usize, usize)) {
    let pad = spec.padding as isize;
    for n in 0..geo.n {
        for oc in 0..geo.cout {
            let group = oc / geo.cout_g;
            for icl in 0..geo.cin_g {
                let ic = group * geo.cin_g + icl;
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let wi = ((oc * geo.cin_g + icl) * geo.kh + ky) * geo.kw + kx;
                        for oy in 0..geo.oh {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            if iy < 0 || iy >= geo.h as isize {
                                continue;
                            }
                            let in_row = ((n * geo.cin + ic) * geo.h + iy as usize) * geo.w;
                            let out_row = ((n * geo.cout + oc) * geo.oh + oy) * geo.ow;
                            for ox in 0..geo.ow {
                                let ix = (ox * spec.stride + kx) as isize - pad;
                                if ix < 0 || ix >= geo.w as isize {
                                    continue;
                                }
                                f(in_row + ix as usize, out_row + ox, wi);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation. `weight` is `cout × cin/groups × kh × kw`,
/// `bias` a vector of length `cout`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let geo = conv_geometry(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        expect_vector("conv2d", "bias", b, geo.cout)?;
    }
    let mut out = Tensor::zeros(Shape::new(geo.n, geo.cout, geo.oh, geo.ow));
    if let Some(b) = bias {
        let p = geo.oh * geo.ow;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = b.data()[(i / p) % geo.cout];
        }
    }
    let (xd, wd) = (x.data(), weight.data());
    let od = out.data_mut();
    conv_for_each(&geo, spec, |ii, oi, wi| od[oi] += xd[ii] * wd[wi]);
    Ok(out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: ConvSpec,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let geo = conv_geometry(x.shape(), weight.shape(), spec)?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape::vector(geo.cout));
    let p = geo.oh * geo.ow;
    for (i, &g) in gy.data().iter().enumerate() {
        gb.data_mut()[(i / p) % geo.cout] += g;
    }
    let (xd, wd, gyd) = (x.data(), weight.data(), gy.data());
    {
        let gxd = gx.data_mut();
        conv_for_each(&geo, spec, |ii, oi, wi| gxd[ii] += gyd[oi] * wd[wi]);
    }
    {
        let gwd = gw.data_mut();
        conv_for_each(&geo, spec, |ii, oi, wi| gwd[wi] += gyd[oi] * xd[ii]);
    }
    Ok((gx, gw, gb))
}

// ---------------------------------------------------------------------------
// layer norm over the channel axis

/// Normalises each pixel's channel vector: `(x-μ)/√(σ²+eps)·γ + β`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let s = x.shape();
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    expect_vector("layer_norm", "gamma", gamma, s.c)?;
    expect_vector("layer_norm", "beta", beta, s.c)?;
    let mut out = Tensor::zeros(s);
    let p = s.plane();
    let (xd, g, b) = (x.data(), gamma.data(), beta.data());
    let od = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * p;
        for pos in 0..p {
            let (mean, inv_std) = channel_stats(xd, base, pos, p, s.c, eps);
            for c in 0..s.c {
                let i = base + c * p + pos;
                od[i] = (xd[i] - mean) * inv_std * g[c] + b[c];
            }
        }
    }
    Ok(out)
}

fn channel_stats(xd: &[f64], base: usize, pos: usize, p: usize, c: usize, eps: f64) -> (f64, f64) {
    let mean = (0..c).map(|k| xd[base + k * p + pos]).sum::<f64>() / c as f64;
    let var = (0..c)
        .map(|k| {
            let d = xd[base + k * p + pos] - mean;
            d * d
        })
        .sum::<f64>()
        / c as f64;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(x: &Tensor, gamma: &Tensor, eps: f64, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let p = s.plane();
    let mut gx = Tensor::zeros(s);
    let mut gg = Tensor::zeros(gamma.shape());
    let mut gb = Tensor::zeros(gamma.shape());
    let (xd, g, gyd) = (x.data(), gamma.data(), gy.data());
    let inv_c = 1.0 / s.c as f64;
    let mut xhat = vec![0.0; s.c];
    let mut gxhat = vec![0.0; s.c];
    for n in 0..s.n {
        let base = n * s.c * p;
        for pos in 0..p {
            let (mean, inv_std) = channel_stats(xd, base, pos, p, s.c, eps);
            let (mut m1, mut m2) = (0.0, 0.0);
            for c in 0..s.c {
                let i = base + c * p + pos;
                xhat[c] = (xd[i] - mean) * inv_std;
                gxhat[c] = gyd[i] * g[c];
                gg.data_mut()[c] += gyd[i] * xhat[c];
                gb.data_mut()[c] += gyd[i];
                m1 += gxhat[c];
                m2 += gxhat[c] * xhat[c];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for c in 0..s.c {
                gx.data_mut()[base + c * p + pos] = inv_std * (gxhat[c] - m1 - xhat[c] * m2);
            }
        }
    }
    (gx, gg, gb)
}

// ---------------------------------------------------------------------------
// softmax over the last (width) axis

/// Row-wise softmax where a row is the `w` axis of each `(n,c,y)`.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let cols = x.shape().w;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Gradient through softmax given its output `y`.
pub fn softmax_lastdim_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let cols = y.shape().w;
    let mut gx = Tensor::zeros(y.shape());
    for ((gxr, yr), gyr) in gx
        .data_mut()
        .chunks_mut(cols)
        .zip(y.data().chunks(cols))
        .zip(gy.data().chunks(cols))
    {
        let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gyr) {
            *o = yv * (gv - dot);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// pooling

/// Non-overlapping `r×r` window means. Spatial dims must be divisible by `r`.
pub fn avg_pool(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::geometry(
            "avg_pool",
            format!("{}x{} not divisible by pool ratio {r}", s.h, s.w),
        ));
    }
    let (oh, ow) = (s.h / r, s.w / r);
    let inv = 1.0 / (r * r) as f64;
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        let mut acc = 0.0;
        for dy in 0..r {
            for dx in 0..r {
                acc += x.at(n, c, y * r + dy, xx * r + dx);
            }
        }
        acc * inv
    }))
}

pub fn avg_pool_backward(input: Shape, r: usize, gy: &Tensor) -> Tensor {
    let inv = 1.0 / (r * r) as f64;
    Tensor::from_fn(input, |n, c, y, x| gy.at(n, c, y / r, x / r) * inv)
}

fn window3(i: usize, len: usize) -> std::ops::Range<usize> {
    i.saturating_sub(1)..(i + 2).min(len)
}

/// 3×3 stride-1 mean filter; padding taps are excluded from the average so
/// constant fields stay constant at the border.
pub fn smooth3(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, y, xx| {
        let (ry, rx) = (window3(y, s.h), window3(xx, s.w));
        let count = (ry.len() * rx.len()) as f64;
        let mut acc = 0.0;
        for yy in ry {
            for xi in rx.clone() {
                acc += x.at(n, c, yy, xi);
            }
        }
        acc / count
    })
}

pub fn smooth3_backward(gy: &Tensor) -> Tensor {
    let s = gy.shape();
    let mut gx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let (ry, rx) = (window3(y, s.h), window3(xx, s.w));
                    let g = gy.at(n, c, y, xx) / (ry.len() * rx.len()) as f64;
                    for yy in ry {
                        for xi in rx.clone() {
                            *gx.at_mut(n, c, yy, xi) += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// bilinear upsampling, align_corners = false

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Source taps for each destination index: `src = (dst+0.5)·in/out − 0.5`,
/// clamped into `[0, in-1]`.
fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h < s.h || out_w < s.w {
        return Err(Error::geometry(
            "upsample_bilinear",
            format!("target {out_h}x{out_w} smaller than input {}x{}", s.h, s.w),
        ));
    }
    let (ty, tx) = (bilinear_taps(s.h, out_h), bilinear_taps(s.w, out_w));
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, xx| {
        let (a, b) = (ty[y], tx[xx]);
        let top = x.at(n, c, a.lo, b.lo) * (1.0 - b.frac) + x.at(n, c, a.lo, b.hi) * b.frac;
        let bottom = x.at(n, c, a.hi, b.lo) * (1.0 - b.frac) + x.at(n, c, a.hi, b.hi) * b.frac;
        top * (1.0 - a.frac) + bottom * a.frac
    }))
}

pub fn upsample_bilinear_backward(input: Shape, gy: &Tensor) -> Tensor {
    let os = gy.shape();
    let (ty, tx) = (bilinear_taps(input.h, os.h), bilinear_taps(input.w, os.w));
    let mut gx = Tensor::zeros(input);
    for n in 0..os.n {
        for c in 0..os.c {
            for (y, a) in ty.iter().enumerate() {
                for (xx, b) in tx.iter().enumerate() {
                    let g = gy.at(n, c, y, xx);
                    *gx.at_mut(n, c, a.lo, b.lo) += g * (1.0 - a.frac) * (1.0 - b.frac);
                    *gx.at_mut(n, c, a.lo, b.hi) += g * (1.0 - a.frac) * b.frac;
                    *gx.at_mut(n, c, a.hi, b.lo) += g * a.frac * (1.0 - b.frac);
                    *gx.at_mut(n, c, a.hi, b.hi) += g * a.frac * b.frac;
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// GELU, exact erf form

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = x.map(gelu_grad_scalar);
    for (o, g) in gx.data_mut().iter_mut().zip(gy.data()) {
        *o *= g;
    }
    gx
}

// ---------------------------------------------------------------------------
// channel concat

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat_channels", format!("{first} vs {s}")));
        }
        channels += s.c;
    }
    let mut data = Vec::with_capacity(first.n * channels * first.plane());
    for n in 0..first.n {
        for t in xs {
            data.extend_from_slice(t.batch_item(n));
        }
    }
    Tensor::new(Shape::new(first.n, channels, first.h, first.w), data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn concat_channels_backward(parts: &[usize], gy: &Tensor) -> Result<Vec<Tensor>> {
    let mut start = 0;
    parts
        .iter()
        .map(|&c| {
            let t = gy.slice_channels(start, c);
            start += c;
            t
        })
        .collect()
}

// ---------------------------------------------------------------------------
// multi-head attention primitives
//
// Heads live in contiguous channel blocks: head j of a tensor with `heads·d`
// channels owns channels `[j·d, (j+1)·d)`. Token index is `y·w + x`.

fn head_dim(op: &'static str, channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::shape(
            op,
            format!("{channels} channels not divisible by {heads} heads"),
        ));
    }
    Ok(channels / heads)
}

/// `S[n,j,t,s] = scale · Σ_d q[n, j·d+d', t] · k[n, j·d+d', s]`, returned as
/// `n × heads × tokens_q × tokens_k`.
pub fn attention_scores(q: &Tensor, k: &Tensor, heads: usize, scale: f64) -> Result<Tensor> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.n != ks.n || qs.c != ks.c {
        return Err(Error::shape("attention_scores", format!("query {qs} vs key {ks}")));
    }
    let d = head_dim("attention_scores", qs.c, heads)?;
    let (nq, nk) = (qs.plane(), ks.plane());
    let mut out = Tensor::zeros(Shape::new(qs.n, heads, nq, nk));
    let od = out.data_mut();
    for n in 0..qs.n {
        for j in 0..heads {
            let base = (n * heads + j) * nq * nk;
            for dd in 0..d {
                let qp = q.plane(n, j * d + dd);
                let kp = k.plane(n, j * d + dd);
                for (t, &qv) in qp.iter().enumerate() {
                    let row = &mut od[base + t * nk..base + (t + 1) * nk];
                    for (o, &kv) in row.iter_mut().zip(kp) {
                        *o += qv * kv;
                    }
                }
            }
            if scale != 1.0 {
                for v in &mut od[base..base + nq * nk] {
                    *v *= scale;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_q, grad_k)`.
pub fn attention_scores_backward(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    scale: f64,
    gs: &Tensor,
) -> (Tensor, Tensor) {
    let (qs, ks) = (q.shape(), k.shape());
    let d = qs.c / heads;
    let (nq, nk) = (qs.plane(), ks.plane());
    let mut gq = Tensor::zeros(qs);
    let mut gk = Tensor::zeros(ks);
    let gsd = gs.data();
    for n in 0..qs.n {
        for j in 0..heads {
            let base = (n * heads + j) * nq * nk;
            for dd in 0..d {
                let ch = j * d + dd;
                let qp = q.plane(n, ch).to_vec();
                let kp = k.plane(n, ch).to_vec();
                let qoff = gq.index(n, ch, 0, 0);
                let koff = gk.index(n, ch, 0, 0);
                for t in 0..nq {
                    let row = &gsd[base + t * nk..base + (t + 1) * nk];
                    let mut acc = 0.0;
                    for (s, &g) in row.iter().enumerate() {
                        acc += g * kp[s];
                        gk.data_mut()[koff + s] += scale * g * qp[t];
                    }
                    gq.data_mut()[qoff + t] += scale * acc;
                }
            }
        }
    }
    (gq, gk)
}

/// `out[n, j·d+e, t] = Σ_s A[n,j,t,s] · v[n, j·d+e, s]`, reshaped to
/// `n × channels(v) × out_h × out_w`.
pub fn attention_apply(a: &Tensor, v: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (as_, vs) = (a.shape(), v.shape());
    let heads = as_.c;
    if as_.n != vs.n || as_.w != vs.plane() || as_.h != out_h * out_w {
        return Err(Error::shape(
            "attention_apply",
            format!("weights {as_} vs values {vs} for output {out_h}x{out_w}"),
        ));
    }
    let d = head_dim("attention_apply", vs.c, heads)?;
    let (nq, nk) = (as_.h, as_.w);
    let mut out = Tensor::zeros(Shape::new(vs.n, vs.c, out_h, out_w));
    let ad = a.data();
    for n in 0..vs.n {
        for j in 0..heads {
            let base = (n * heads + j) * nq * nk;
            for e in 0..d {
                let ch = j * d + e;
                let vp = v.plane(n, ch);
                let off = out.index(n, ch, 0, 0);
                let od = &mut out.data_mut()[off..off + nq];
                for (t, o) in od.iter_mut().enumerate() {
                    let row = &ad[base + t * nk..base + (t + 1) * nk];
                    *o = row.iter().zip(vp).map(|(x, y)| x * y).sum();
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_a, grad_v)`.
pub fn attention_apply_backward(a: &Tensor, v: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (as_, vs) = (a.shape(), v.shape());
    let heads = as_.c;
    let d = vs.c / heads;
    let (nq, nk) = (as_.h, as_.w);
    let mut ga = Tensor::zeros(as_);
    let mut gv = Tensor::zeros(vs);
    let ad = a.data();
    for n in 0..vs.n {
        for j in 0..heads {
            let base = (n * heads + j) * nq * nk;
            for e in 0..d {
                let ch = j * d + e;
                let vp = v.plane(n, ch).to_vec();
                let gp = gy.plane(n, ch).to_vec();
                let voff = gv.index(n, ch, 0, 0);
                for (t, &g) in gp.iter().enumerate() {
                    let row = base + t * nk;
                    for s in 0..nk {
                        ga.data_mut()[row + s] += g * vp[s];
                        gv.data_mut()[voff + s] += g * ad[row + s];
                    }
                }
            }
        }
    }
    (ga, gv)
}

// ---------------------------------------------------------------------------
// elementwise and reductions

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    Ok(out)
}

/// Mean per-pixel cross-entropy of `logits` (`n × classes × h × w`) against
/// class indices laid out as `[n][y][x]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    check_labels(s, labels)?;
    let p = s.plane();
    let mut total = 0.0;
    for n in 0..s.n {
        for pos in 0..p {
            let label = labels[n * p + pos];
            let base = n * s.c * p + pos;
            let max = (0..s.c)
                .map(|c| logits.data()[base + c * p])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..s.c)
                .map(|c| (logits.data()[base + c * p] - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            total += lse - logits.data()[base + label * p];
        }
    }
    Ok(total / (s.n * p) as f64)
}

pub fn cross_entropy_backward(logits: &Tensor, labels: &[usize], g: f64) -> Tensor {
    let s = logits.shape();
    let p = s.plane();
    let scale = g / (s.n * p) as f64;
    let mut gx = Tensor::zeros(s);
    for n in 0..s.n {
        for pos in 0..p {
            let base = n * s.c * p + pos;
            let max = (0..s.c)
                .map(|c| logits.data()[base + c * p])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..s.c).map(|c| (logits.data()[base + c * p] - max).exp()).sum();
            for c in 0..s.c {
                let prob = (logits.data()[base + c * p] - max).exp() / z;
                let target = if c == labels[n * p + pos] { 1.0 } else { 0.0 };
                gx.data_mut()[base + c * p] = (prob - target) * scale;
            }
        }
    }
    gx
}

fn check_labels(s: Shape, labels: &[usize]) -> Result<()> {
    if labels.len() != s.n * s.plane() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for logits {s}", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(Error::shape(
            "cross_entropy",
            format!("label {bad} out of range for {} classes", s.c),
        ));
    }
    Ok(())
}

/// Argmax over the channel axis; ties go to the lowest index.
pub fn argmax_channels(x: &Tensor) -> Vec<usize> {
    let s = x.shape();
    let p = s.plane();
    let mut out = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        for pos in 0..p {
            let mut best = 0;
            let mut best_v = x.data()[n * s.c * p + pos];
            for c in 1..s.c {
                let v = x.data()[(n * s.c + c) * p + pos];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_identity_and_dot_product() {
        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        let y = linear(&x, &Tensor::eye(2, 2), None).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);

        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let w = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.5]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[3.5]);
    }

    #[test]
    fn linear_zero_weight_yields_bias() {
        let x = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, x| (n + c * y + x) as f64 - 1.5);
        let w = Tensor::zeros(Shape::matrix(3, 2));
        let b = Tensor::vector(vec![0.25, -2.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        for n in 0..2 {
            for yy in 0..2 {
                for xx in 0..2 {
                    assert_eq!(y.at(n, 0, yy, xx), 0.25);
                    assert_eq!(y.at(n, 1, yy, xx), -2.0);
                }
            }
        }
    }

    #[test]
    fn linear_mismatch_names_both_shapes() {
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        let err = linear(&x, &Tensor::eye(2, 2), None).unwrap_err().to_string();
        assert!(err.contains("linear"), "{err}");
        assert!(err.contains("1x3x2x2") && err.contains("1x1x2x2"), "{err}");
    }

    #[test]
    fn conv_summing_kernel() {
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| (y * 3 + x) as f64);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, None, ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data()[0], 36.0);
    }

    #[test]
    fn conv_delta_input_reproduces_flipped_kernel() {
        // Cross-correlation of a centred delta gives out[y,x] = k[2-y, 2-x].
        let mut x = Tensor::zeros(Shape::new(1, 1, 3, 3));
        *x.at_mut(0, 0, 1, 1) = 1.0;
        let w = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| (1 + y * 3 + x) as f64);
        let y = conv2d(&x, &w, None, ConvSpec::new(1, 1, 1)).unwrap();
        for yy in 0..3 {
            for xx in 0..3 {
                assert_eq!(y.at(0, 0, yy, xx), w.at(0, 0, 2 - yy, 2 - xx));
            }
        }
    }

    #[test]
    fn depthwise_identity_kernel() {
        let x = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n as f64 - c as f64) * 0.3 + (y * x) as f64
        });
        let w = Tensor::from_fn(Shape::new(3, 1, 3, 3), |_, _, y, x| {
            if (y, x) == (1, 1) {
                1.0
            } else {
                0.0
            }
        });
        let y = conv2d(&x, &w, None, ConvSpec::new(1, 1, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(Shape::new(4, 1, 3, 3));
        assert!(matches!(
            conv2d(&x, &w, None, ConvSpec::new(1, 1, 2)),
            Err(Error::Geometry { .. })
        ));
        let w = Tensor::zeros(Shape::new(1, 3, 7, 7));
        assert!(matches!(
            conv2d(&x, &w, None, ConvSpec::new(1, 1, 1)),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn stride_two_output_size() {
        let x = Tensor::zeros(Shape::new(1, 2, 8, 6));
        let w = Tensor::zeros(Shape::new(4, 2, 3, 3));
        let y = conv2d(&x, &w, None, ConvSpec::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 4, 3));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::vector(vec![1.0; 4]).unwrap();
        let zeros = Tensor::vector(vec![0.0; 4]).unwrap();
        let x = Tensor::full(Shape::new(1, 4, 2, 2), 7.5);
        let y = layer_norm(&x, &ones, &zeros, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, -1.0]).unwrap();
        let y = layer_norm(
            &x,
            &Tensor::vector(vec![1.0, 1.0]).unwrap(),
            &Tensor::vector(vec![0.0, 0.0]).unwrap(),
            1e-12,
        )
        .unwrap();
        assert!(close(y.data()[0], 1.0, 1e-10) && close(y.data()[1], -1.0, 1e-10));

        let x = Tensor::from_fn(Shape::new(1, 4, 2, 2), |_, c, y, x| (c * 7 + y * 3 + x) as f64);
        let b = Tensor::vector(vec![0.5; 4]).unwrap();
        let y = layer_norm(&x, &zeros, &b, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let v = Tensor::vector(vec![1.0]).unwrap();
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(layer_norm(&x, &v, &v, 0.0).is_err());
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        for v in softmax_lastdim(&t).data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let t = Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap();
        let s = softmax_lastdim(&t);
        assert!(s.is_finite());
        assert!(close(s.data()[0], 1.0, 1e-15) && s.data()[1] < 1e-300);

        // exp(k)/Σexp for k = 1,2,3 evaluated directly
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let s = softmax_lastdim(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        for (got, want) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!(close(*got, want, 1e-7));
        }
        for (got, ei) in s.data().iter().zip(&e) {
            assert!(close(*got, ei / z, 1e-15));
        }
    }

    #[test]
    fn avg_pool_cases() {
        let x = Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, c, y, x| (c + y * x) as f64);
        assert_eq!(avg_pool(&x, 1).unwrap(), x);
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool(&x, 2).unwrap().data(), &[2.5]);
        let x = Tensor::full(Shape::new(1, 3, 8, 8), -1.75);
        assert!(avg_pool(&x, 4).unwrap().data().iter().all(|&v| v == -1.75));
        assert!(matches!(
            avg_pool(&Tensor::zeros(Shape::new(1, 1, 6, 6)), 4),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn upsample_cases() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 5), |_, c, y, x| (c * 10 + y * 5 + x) as f64);
        assert_eq!(upsample_bilinear(&x, 3, 5).unwrap(), x);

        let x = Tensor::full(Shape::new(1, 1, 2, 3), 4.25);
        assert!(upsample_bilinear(&x, 7, 9).unwrap().data().iter().all(|&v| v == 4.25));

        let x = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let y = upsample_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);

        assert!(upsample_bilinear(&x, 1, 1).is_err());
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!(close(gelu_scalar(10.0), 10.0, 1e-9));
        assert!(close(gelu_scalar(1.0), 0.841_344_746_1, 1e-9));
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::from_fn(Shape::new(2, 2, 2, 2), |n, c, y, x| (n * 8 + c * 4 + y * 2 + x) as f64);
        let b = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, x| -((n * 12 + c * 4 + y * 2 + x) as f64));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape().c, 5);
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 3).unwrap(), b);
        let bad = Tensor::zeros(Shape::new(2, 1, 3, 2));
        assert!(matches!(concat_channels(&[&a, &bad]), Err(Error::Shape { .. })));
    }

    #[test]
    fn smooth3_preserves_constants() {
        let x = Tensor::full(Shape::new(1, 2, 5, 4), 3.5);
        assert!(smooth3(&x).data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn argmax_tie_goes_low() {
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert_eq!(argmax_channels(&x), vec![0; 4]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = Tensor::zeros(Shape::new(1, 4, 2, 2));
        let ce = cross_entropy(&x, &[0, 1, 2, 3]).unwrap();
        assert!(close(ce, 4f64.ln(), 1e-15));
        assert!(cross_entropy(&x, &[0, 1, 2, 4]).is_err());
    }
}
