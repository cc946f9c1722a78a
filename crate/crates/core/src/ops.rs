//! Forward and analytic backward implementations of the network layers.
//!
//! Every backward pass here is hand-written and checked against central
//! finite differences (see [`crate::gradcheck`]). Reductions accumulate in
//! `f64` and are written back to `f32` storage once per output element.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output spatial extent of a strided window op: floor((n + 2*pad - k)/stride) + 1.
fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output index range [lo, hi) for which `out * stride + offset` stays
/// inside [0, in_extent), with offset = kernel position minus padding.
#[inline]
fn valid_out_range(offset: isize, stride: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 {
        ((-offset) + s - 1) / s
    } else {
        0
    };
    let hi_exclusive = (in_extent as isize - offset + s - 1) / s;
    let lo = lo.clamp(0, out_extent as isize) as usize;
    let hi = hi_exclusive.clamp(0, out_extent as isize) as usize;
    (lo, hi.max(lo))
}

/// 2D convolution, NCHW layout, square padding.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (batch, in_ch, in_h, in_w) = dims4("conv2d", input)?;
    let (out_ch, w_in_ch, k_h, k_w) = dims4("conv2d", weights)?;
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if w_in_ch != in_ch {
        return Err(Error::shape(
            "conv2d",
            format!("input has {in_ch} channels, kernel expects {w_in_ch}"),
        ));
    }
    if bias.shape() != [out_ch] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, want [{out_ch}]", bias.shape()),
        ));
    }
    let (out_h, out_w) = match (
        out_extent(in_h, k_h, stride, pad),
        out_extent(in_w, k_w, stride, pad),
    ) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k_h}x{k_w} pad {pad} yields empty output on {in_h}x{in_w} input"),
            ))
        }
    };

    let mut out = Tensor::zeros(&[batch, out_ch, out_h, out_w]);
    let x = input.data();
    let w = weights.data();
    let mut acc = vec![0.0f64; out_h * out_w];

    // Pointwise convolutions reduce to channel-blocked axpy over planes.
    if k_h == 1 && k_w == 1 && pad == 0 && stride == 1 {
        let plane = in_h * in_w;
        for b in 0..batch {
            let x_base = b * in_ch * plane;
            for oc in 0..out_ch {
                let b0 = bias.data()[oc] as f64;
                acc.iter_mut().for_each(|a| *a = b0);
                let wrow = &w[oc * in_ch..][..in_ch];
                let blocks = in_ch / 4;
                for i in 0..blocks {
                    let ic = i * 4;
                    axpy4(
                        &mut acc,
                        &x[x_base + ic * plane..][..plane],
                        &x[x_base + (ic + 1) * plane..][..plane],
                        &x[x_base + (ic + 2) * plane..][..plane],
                        &x[x_base + (ic + 3) * plane..][..plane],
                        [
                            wrow[ic] as f64,
                            wrow[ic + 1] as f64,
                            wrow[ic + 2] as f64,
                            wrow[ic + 3] as f64,
                        ],
                    );
                }
                for ic in blocks * 4..in_ch {
                    axpy1(&mut acc, &x[x_base + ic * plane..][..plane], wrow[ic] as f64);
                }
                let o_plane = &mut out.data_mut()[(b * out_ch + oc) * plane..][..plane];
                for (o, a) in o_plane.iter_mut().zip(acc.iter()) {
                    *o = *a as f32;
                }
            }
        }
        return Ok(out);
    }

    for b in 0..batch {
        for oc in 0..out_ch {
            let b0 = bias.data()[oc] as f64;
            acc.iter_mut().for_each(|a| *a = b0);
            for ic in 0..in_ch {
                let x_plane = &x[(b * in_ch + ic) * in_h * in_w..][..in_h * in_w];
                for ky in 0..k_h {
                    for kx in 0..k_w {
                        let wv = w[((oc * in_ch + ic) * k_h + ky) * k_w + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let off_y = ky as isize - pad as isize;
                        let off_x = kx as isize - pad as isize;
                        let (oy_lo, oy_hi) = valid_out_range(off_y, stride, in_h, out_h);
                        let (ox_lo, ox_hi) = valid_out_range(off_x, stride, in_w, out_w);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + off_y;
                            let row = &x_plane[iy as usize * in_w..][..in_w];
                            let arow = &mut acc[oy * out_w..][..out_w];
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + off_x) as usize;
                                let n = ox_hi - ox_lo;
                                for (a, &xv) in
                                    arow[ox_lo..ox_hi].iter_mut().zip(&row[ix0..ix0 + n])
                                {
                                    *a += wv * xv as f64;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * stride) as isize + off_x;
                                    arow[ox] += wv * row[ix as usize] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let o_plane =
                &mut out.data_mut()[(b * out_ch + oc) * out_h * out_w..][..out_h * out_w];
            for (o, a) in o_plane.iter_mut().zip(acc.iter()) {
                *o = *a as f32;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, in_ch, in_h, in_w) = dims4("conv2d", input)?;
    let (out_ch, _, k_h, k_w) = dims4("conv2d", weights)?;
    let (gb_batch, g_out_ch, out_h, out_w) = dims4("conv2d", grad_out)?;
    if gb_batch != batch || g_out_ch != out_ch {
        return Err(Error::shape(
            "conv2d",
            format!("grad_out shape {:?} does not match forward", grad_out.shape()),
        ));
    }

    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();

    let mut grad_bias = Tensor::zeros(&[out_ch]);
    for oc in 0..out_ch {
        let mut acc = 0.0f64;
        for b in 0..batch {
            let g_plane = &g[(b * out_ch + oc) * out_h * out_w..][..out_h * out_w];
            for v in g_plane {
                acc += *v as f64;
            }
        }
        grad_bias.data_mut()[oc] = acc as f32;
    }

    let mut grad_w = Tensor::zeros(weights.shape());
    let full_plane = k_h == 1 && k_w == 1 && pad == 0 && stride == 1 && in_h == out_h && in_w == out_w;
    let mut scratch = vec![0.0f64; out_h * out_w];
    for oc in 0..out_ch {
        for ic in 0..in_ch {
            for ky in 0..k_h {
                for kx in 0..k_w {
                    let off_y = ky as isize - pad as isize;
                    let off_x = kx as isize - pad as isize;
                    let (oy_lo, oy_hi) = valid_out_range(off_y, stride, in_h, out_h);
                    let (ox_lo, ox_hi) = valid_out_range(off_x, stride, in_w, out_w);
                    let mut acc = 0.0f64;
                    for b in 0..batch {
                        let x_plane = &x[(b * in_ch + ic) * in_h * in_w..][..in_h * in_w];
                        let g_plane = &g[(b * out_ch + oc) * out_h * out_w..][..out_h * out_w];
                        if full_plane {
                            acc += dot_two_pass(g_plane, x_plane, &mut scratch);
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + off_y;
                            let row = &x_plane[iy as usize * in_w..][..in_w];
                            let grow = &g_plane[oy * out_w..][..out_w];
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + off_x) as usize;
                                let n = ox_hi - ox_lo;
                                acc += dot_two_pass(
                                    &grow[ox_lo..ox_hi],
                                    &row[ix0..ix0 + n],
                                    &mut scratch,
                                );
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * stride) as isize + off_x;
                                    acc += grow[ox] as f64 * row[ix as usize] as f64;
                                }
                            }
                        }
                    }
                    grad_w.data_mut()[((oc * in_ch + ic) * k_h + ky) * k_w + kx] = acc as f32;
                }
            }
        }
    }

    let mut grad_in = Tensor::zeros(input.shape());
    let mut acc = vec![0.0f64; in_h * in_w];

    if full_plane {
        let plane = in_h * in_w;
        for b in 0..batch {
            let g_base = b * out_ch * plane;
            for ic in 0..in_ch {
                acc.iter_mut().for_each(|a| *a = 0.0);
                let blocks = out_ch / 4;
                for i in 0..blocks {
                    let oc = i * 4;
                    axpy4(
                        &mut acc,
                        &g[g_base + oc * plane..][..plane],
                        &g[g_base + (oc + 1) * plane..][..plane],
                        &g[g_base + (oc + 2) * plane..][..plane],
                        &g[g_base + (oc + 3) * plane..][..plane],
                        [
                            w[oc * in_ch + ic] as f64,
                            w[(oc + 1) * in_ch + ic] as f64,
                            w[(oc + 2) * in_ch + ic] as f64,
                            w[(oc + 3) * in_ch + ic] as f64,
                        ],
                    );
                }
                for oc in blocks * 4..out_ch {
                    axpy1(&mut acc, &g[g_base + oc * plane..][..plane], w[oc * in_ch + ic] as f64);
                }
                let gi_plane = &mut grad_in.data_mut()[(b * in_ch + ic) * plane..][..plane];
                for (o, a) in gi_plane.iter_mut().zip(acc.iter()) {
                    *o = *a as f32;
                }
            }
        }
        return Ok((grad_in, grad_w, grad_bias));
    }

    for b in 0..batch {
        for ic in 0..in_ch {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for oc in 0..out_ch {
                let g_plane = &g[(b * out_ch + oc) * out_h * out_w..][..out_h * out_w];
                for ky in 0..k_h {
                    for kx in 0..k_w {
                        let wv = w[((oc * in_ch + ic) * k_h + ky) * k_w + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let off_y = ky as isize - pad as isize;
                        let off_x = kx as isize - pad as isize;
                        let (oy_lo, oy_hi) = valid_out_range(off_y, stride, in_h, out_h);
                        let (ox_lo, ox_hi) = valid_out_range(off_x, stride, in_w, out_w);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + off_y;
                            let arow = &mut acc[iy as usize * in_w..][..in_w];
                            let grow = &g_plane[oy * out_w..][..out_w];
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + off_x) as usize;
                                for (gv, a) in grow[ox_lo..ox_hi]
                                    .iter()
                                    .zip(arow[ix0..ix0 + (ox_hi - ox_lo)].iter_mut())
                                {
                                    *a += wv * *gv as f64;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * stride) as isize + off_x;
                                    arow[ix as usize] += wv * grow[ox] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let gi_plane =
                &mut grad_in.data_mut()[(b * in_ch + ic) * in_h * in_w..][..in_h * in_w];
            for (o, a) in gi_plane.iter_mut().zip(acc.iter()) {
                *o = *a as f32;
            }
        }
    }

    Ok((grad_in, grad_w, grad_bias))
}

/// Max pooling over k x k windows. Returns the pooled map and the flat input
/// index of each window's argmax (first occurrence in row-major order wins
/// ties), which the backward pass routes gradient to.
pub fn max_pool2d_forward(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let (batch, ch, in_h, in_w) = dims4("max_pool2d", input)?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d", "k and stride must be positive"));
    }
    if k > in_h || k > in_w {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {k}x{k} larger than input {in_h}x{in_w}"),
        ));
    }
    let out_h = (in_h - k) / stride + 1;
    let out_w = (in_w - k) / stride + 1;
    let mut out = Tensor::zeros(&[batch, ch, out_h, out_w]);
    let mut argmax = vec![0u32; batch * ch * out_h * out_w];
    let x = input.data();
    let mut oi = 0;
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * in_h * in_w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for wy in 0..k {
                        let row = base + (y0 + wy) * in_w + x0;
                        for wx in 0..k {
                            let v = x[row + wx];
                            if v > best {
                                best = v;
                                best_idx = row + wx;
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d_backward(argmax: &[u32], grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax.iter()) {
        gi[idx as usize] += g;
    }
    grad_in
}

/// Elementwise max(0, x). Subgradient at exactly 0 is 0.
pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let mut grad_in = Tensor::zeros(input.shape());
    for ((gi, &x), &g) in grad_in
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(grad_out.data())
    {
        if x > 0.0 {
            *gi = g;
        }
    }
    grad_in
}

/// Eight-lane f64 tree sum; lane grouping is fixed so results are
/// bit-stable across targets.
#[inline]
fn sum8(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    for c in a.chunks_exact(8) {
        for j in 0..8 {
            acc[j] += c[j];
        }
    }
    let mut tail = 0.0f64;
    for &v in &a[a.len() / 8 * 8..] {
        tail += v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// f64 dot product of two f32 slices: an exact elementwise product pass
/// (vectorizable) followed by a fixed-shape tree sum. `scratch` must be at
/// least as long as the inputs.
#[inline]
fn dot_two_pass(a: &[f32], b: &[f32], scratch: &mut [f64]) -> f64 {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let s = &mut scratch[..n];
    for ((p, &x), &y) in s.iter_mut().zip(a).zip(b) {
        *p = x as f64 * y as f64;
    }
    sum8(s)
}

/// acc += w0*x0 + w1*x1 + w2*x2 + w3*x3, elementwise over equal-length
/// slices. The compute-dense form every gemm-like kernel here reduces to:
/// independent f64 updates vectorize where dot-style reductions do not.
#[inline]
fn axpy4(acc: &mut [f64], x0: &[f32], x1: &[f32], x2: &[f32], x3: &[f32], w: [f64; 4]) {
    let n = acc.len();
    for i in 0..n {
        acc[i] += w[0] * x0[i] as f64
            + w[1] * x1[i] as f64
            + w[2] * x2[i] as f64
            + w[3] * x3[i] as f64;
    }
}

#[inline]
fn axpy1(acc: &mut [f64], x: &[f32], w: f64) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += w * v as f64;
    }
}

/// y = W x + b per batch row. Input is flattened per row; weights are
/// (out_dim, in_dim).
pub fn fully_connected_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let batch = input.shape()[0];
    let in_dim = input.numel() / batch;
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != in_dim {
        return Err(Error::shape(
            "fully_connected",
            format!("weights {ws:?} incompatible with input rows of {in_dim}"),
        ));
    }
    let out_dim = ws[0];
    if bias.shape() != [out_dim] {
        return Err(Error::shape(
            "fully_connected",
            format!("bias shape {:?}, want [{out_dim}]", bias.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[batch, out_dim]);
    let x = input.data();
    let w = weights.data();
    // Transposed weight copy turns each row's accumulation into contiguous
    // four-blocked axpy passes over the output vector.
    let mut wt = vec![0.0f32; in_dim * out_dim];
    for o in 0..out_dim {
        for k in 0..in_dim {
            wt[k * out_dim + o] = w[o * in_dim + k];
        }
    }
    let mut acc = vec![0.0f64; out_dim];
    for b in 0..batch {
        for (a, &bv) in acc.iter_mut().zip(bias.data()) {
            *a = bv as f64;
        }
        let xrow = &x[b * in_dim..][..in_dim];
        let blocks = in_dim / 4;
        for i in 0..blocks {
            let k = i * 4;
            axpy4(
                &mut acc,
                &wt[k * out_dim..][..out_dim],
                &wt[(k + 1) * out_dim..][..out_dim],
                &wt[(k + 2) * out_dim..][..out_dim],
                &wt[(k + 3) * out_dim..][..out_dim],
                [
                    xrow[k] as f64,
                    xrow[k + 1] as f64,
                    xrow[k + 2] as f64,
                    xrow[k + 3] as f64,
                ],
            );
        }
        for k in blocks * 4..in_dim {
            axpy1(&mut acc, &wt[k * out_dim..][..out_dim], xrow[k] as f64);
        }
        let orow = &mut out.data_mut()[b * out_dim..][..out_dim];
        for (o, a) in orow.iter_mut().zip(acc.iter()) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let batch = input.shape()[0];
    let in_dim = input.numel() / batch;
    let out_dim = weights.shape()[0];
    if grad_out.shape() != [batch, out_dim] {
        return Err(Error::shape(
            "fully_connected",
            format!("grad_out shape {:?} does not match forward", grad_out.shape()),
        ));
    }
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();

    let mut grad_w = Tensor::zeros(weights.shape());
    let mut grad_b = Tensor::zeros(&[out_dim]);
    let mut wacc = vec![0.0f64; in_dim];
    for o in 0..out_dim {
        let mut bacc = 0.0f64;
        for b in 0..batch {
            bacc += g[b * out_dim + o] as f64;
        }
        grad_b.data_mut()[o] = bacc as f32;
        wacc.iter_mut().for_each(|a| *a = 0.0);
        let blocks = batch / 4;
        for i in 0..blocks {
            let b = i * 4;
            axpy4(
                &mut wacc,
                &x[b * in_dim..][..in_dim],
                &x[(b + 1) * in_dim..][..in_dim],
                &x[(b + 2) * in_dim..][..in_dim],
                &x[(b + 3) * in_dim..][..in_dim],
                [
                    g[b * out_dim + o] as f64,
                    g[(b + 1) * out_dim + o] as f64,
                    g[(b + 2) * out_dim + o] as f64,
                    g[(b + 3) * out_dim + o] as f64,
                ],
            );
        }
        for b in blocks * 4..batch {
            axpy1(&mut wacc, &x[b * in_dim..][..in_dim], g[b * out_dim + o] as f64);
        }
        let gw_row = &mut grad_w.data_mut()[o * in_dim..][..in_dim];
        for (gw, a) in gw_row.iter_mut().zip(wacc.iter()) {
            *gw = *a as f32;
        }
    }

    let mut grad_in = Tensor::zeros(input.shape());
    let mut acc = vec![0.0f64; in_dim];
    for b in 0..batch {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let grow = &g[b * out_dim..][..out_dim];
        let blocks = out_dim / 4;
        for i in 0..blocks {
            let o = i * 4;
            axpy4(
                &mut acc,
                &w[o * in_dim..][..in_dim],
                &w[(o + 1) * in_dim..][..in_dim],
                &w[(o + 2) * in_dim..][..in_dim],
                &w[(o + 3) * in_dim..][..in_dim],
                [
                    grow[o] as f64,
                    grow[o + 1] as f64,
                    grow[o + 2] as f64,
                    grow[o + 3] as f64,
                ],
            );
        }
        for o in blocks * 4..out_dim {
            axpy1(&mut acc, &w[o * in_dim..][..in_dim], grow[o] as f64);
        }
        let girow = &mut grad_in.data_mut()[b * in_dim..][..in_dim];
        for (o, a) in girow.iter_mut().zip(acc.iter()) {
            *o = *a as f32;
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            op,
            format!("expected 4-order tensor, got shape {s:?}"),
        ));
    }
    Ok((s[0], s[1], s[2], s[3]))
}
