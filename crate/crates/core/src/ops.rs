//! Forward and backward kernels for the operators used by the networks,
//! plus the fixed resampling primitives (pooling, nearest/bilinear resize,
//! flips, crops) used by the physics harness and data augmentation.
//!
//! Convolution uses the cross-correlation convention. All kernels are pure
//! functions over owned buffers and run single-threaded.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f32 = 0.2;

/// Valid output range [lo, hi) for an output axis of size `o_size` where the
/// input index is `o * stride + k_off - padding` and must land in [0, i_size).
#[inline]
fn out_range(o_size: usize, i_size: usize, stride: usize, padding: usize, k_off: usize) -> (usize, usize) {
    let lo = if padding > k_off {
        (padding - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if i_size + padding > k_off {
        ((i_size - 1 + padding - k_off) / stride + 1).min(o_size)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")));
    }
    Ok(())
}

fn conv_out_dim(i: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = i + 2 * padding;
    if padded < k {
        return Err(Error::shape(format!(
            "kernel size {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// 2D cross-correlation. `weight` is (C_out, C_in, k, k), `bias` is
/// (1, C_out, 1, 1).
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_stride(stride)?;
    let [n, cin, h, w] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input shape {:?} incompatible with weight shape {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if bias.shape() != [1, cout, 1, 1] {
        return Err(Error::shape(format!(
            "conv2d: bias shape {:?}, expected {:?}",
            bias.shape(),
            [1, cout, 1, 1]
        )));
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;
    let mut out = Tensor::zeros([n, cout, oh, ow]);

    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();

    for img in 0..n {
        for co in 0..cout {
            let plane = ((img * cout + co) * oh) * ow;
            od[plane..plane + oh * ow].fill(bd[co]);
        }
    }

    for img in 0..n {
        for co in 0..cout {
            for ci in 0..cin {
                let in_plane = ((img * cin + ci) * h) * w;
                let out_plane = ((img * cout + co) * oh) * ow;
                for dkh in 0..kh {
                    let (oy_lo, oy_hi) = out_range(oh, h, stride, padding, dkh);
                    for dkw in 0..kw {
                        let wv = wd[((co * cin + ci) * kh + dkh) * kw + dkw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = out_range(ow, w, stride, padding, dkw);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + dkh - padding;
                            let in_row = in_plane + iy * w;
                            let out_row = out_plane + oy * ow;
                            if stride == 1 {
                                let ix0 = ox_lo + dkw - padding;
                                let len = ox_hi - ox_lo;
                                let src = &xd[in_row + ix0..in_row + ix0 + len];
                                let dst = &mut od[out_row + ox_lo..out_row + ox_lo + len];
                                for i in 0..len {
                                    dst[i] += wv * src[i];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + dkw - padding;
                                    od[out_row + ox] += wv * xd[in_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, cin, h, w] = input.shape();
    let [cout, _, kh, kw] = weight.shape();
    let [gn, gc, oh, ow] = grad_out.shape();
    if gn != n || gc != cout {
        return Err(Error::shape(format!(
            "conv2d_backward: grad shape {:?} vs expected batch {n} channels {cout}",
            grad_out.shape()
        )));
    }
    let mut gin = Tensor::zeros([n, cin, h, w]);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros([1, cout, 1, 1]);

    let xd = input.data();
    let wd = weight.data();
    let god = grad_out.data();

    {
        let gbd = gb.data_mut();
        for img in 0..n {
            for co in 0..cout {
                let plane = ((img * cout + co) * oh) * ow;
                let mut acc = 0f64;
                for v in &god[plane..plane + oh * ow] {
                    acc += *v as f64;
                }
                gbd[co] += acc as f32;
            }
        }
    }

    let gind = gin.data_mut();
    let gwd = gw.data_mut();
    for img in 0..n {
        for co in 0..cout {
            for ci in 0..cin {
                let in_plane = ((img * cin + ci) * h) * w;
                let out_plane = ((img * cout + co) * oh) * ow;
                for dkh in 0..kh {
                    let (oy_lo, oy_hi) = out_range(oh, h, stride, padding, dkh);
                    for dkw in 0..kw {
                        let widx = ((co * cin + ci) * kh + dkh) * kw + dkw;
                        let wv = wd[widx];
                        let (ox_lo, ox_hi) = out_range(ow, w, stride, padding, dkw);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut wacc = 0f64;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + dkh - padding;
                            let in_row = in_plane + iy * w;
                            let out_row = out_plane + oy * ow;
                            if stride == 1 {
                                let ix0 = ox_lo + dkw - padding;
                                let len = ox_hi - ox_lo;
                                let go_row = &god[out_row + ox_lo..out_row + ox_lo + len];
                                // dL/dx scatter and dL/dw dot share this row walk
                                let gi = &mut gind[in_row + ix0..in_row + ix0 + len];
                                let xr = &xd[in_row + ix0..in_row + ix0 + len];
                                let mut dot = 0f32;
                                for i in 0..len {
                                    gi[i] += wv * go_row[i];
                                    dot += go_row[i] * xr[i];
                                }
                                wacc += dot as f64;
                            } else {
                                let mut dot = 0f32;
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + dkw - padding;
                                    let g = god[out_row + ox];
                                    gind[in_row + ix] += wv * g;
                                    dot += g * xd[in_row + ix];
                                }
                                wacc += dot as f64;
                            }
                        }
                        gwd[widx] += wacc as f32;
                    }
                }
            }
        }
    }
    Ok((gin, gw, gb))
}

fn deconv_out_dim(
    i: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<usize> {
    let grown = (i - 1) * stride + k + output_padding;
    if grown < 2 * padding {
        return Err(Error::shape(format!(
            "deconv2d: padding {padding} too large for input extent {i} kernel {k}"
        )));
    }
    Ok(grown - 2 * padding)
}

/// Transposed convolution: the adjoint of `conv2d` under the inner product.
/// `weight` is (C_in, C_out, k, k); `bias` is (1, C_out, 1, 1) and is added
/// to the output.
pub fn deconv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    check_stride(stride)?;
    if output_padding >= stride {
        return Err(Error::invalid(format!(
            "output_padding {output_padding} must be < stride {stride}"
        )));
    }
    let [n, cin, h, w] = input.shape();
    let [wcin, cout, kh, kw] = weight.shape();
    if wcin != cin {
        return Err(Error::shape(format!(
            "deconv2d: input shape {:?} incompatible with weight shape {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if bias.shape() != [1, cout, 1, 1] {
        return Err(Error::shape(format!(
            "deconv2d: bias shape {:?}, expected {:?}",
            bias.shape(),
            [1, cout, 1, 1]
        )));
    }
    let oh = deconv_out_dim(h, kh, stride, padding, output_padding)?;
    let ow = deconv_out_dim(w, kw, stride, padding, output_padding)?;
    let mut out = Tensor::zeros([n, cout, oh, ow]);

    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();

    for img in 0..n {
        for co in 0..cout {
            let plane = ((img * cout + co) * oh) * ow;
            od[plane..plane + oh * ow].fill(bd[co]);
        }
    }

    // Scatter: out[iy*s + kh - p][ix*s + kw - p] += x[iy][ix] * w
    for img in 0..n {
        for ci in 0..cin {
            for co in 0..cout {
                let in_plane = ((img * cin + ci) * h) * w;
                let out_plane = ((img * cout + co) * oh) * ow;
                for dkh in 0..kh {
                    let (iy_lo, iy_hi) = out_range(h, oh, stride, padding, dkh);
                    for dkw in 0..kw {
                        let wv = wd[((ci * cout + co) * kh + dkh) * kw + dkw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ix_lo, ix_hi) = out_range(w, ow, stride, padding, dkw);
                        if ix_lo >= ix_hi {
                            continue;
                        }
                        for iy in iy_lo..iy_hi {
                            let oy = iy * stride + dkh - padding;
                            let in_row = in_plane + iy * w;
                            let out_row = out_plane + oy * ow;
                            if stride == 1 {
                                let ox0 = ix_lo + dkw - padding;
                                let len = ix_hi - ix_lo;
                                let src = &xd[in_row + ix_lo..in_row + ix_lo + len];
                                let dst = &mut od[out_row + ox0..out_row + ox0 + len];
                                for i in 0..len {
                                    dst[i] += wv * src[i];
                                }
                            } else {
                                for ix in ix_lo..ix_hi {
                                    let ox = ix * stride + dkw - padding;
                                    od[out_row + ox] += wv * xd[in_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of deconv2d w.r.t. input, weight and bias.
pub fn deconv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, cin, h, w] = input.shape();
    let [_, cout, kh, kw] = weight.shape();
    let [gn, gc, oh, ow] = grad_out.shape();
    if gn != n || gc != cout {
        return Err(Error::shape(format!(
            "deconv2d_backward: grad shape {:?} vs expected batch {n} channels {cout}",
            grad_out.shape()
        )));
    }
    let mut gin = Tensor::zeros([n, cin, h, w]);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros([1, cout, 1, 1]);

    let xd = input.data();
    let wd = weight.data();
    let god = grad_out.data();

    {
        let gbd = gb.data_mut();
        for img in 0..n {
            for co in 0..cout {
                let plane = ((img * cout + co) * oh) * ow;
                let mut acc = 0f64;
                for v in &god[plane..plane + oh * ow] {
                    acc += *v as f64;
                }
                gbd[co] += acc as f32;
            }
        }
    }

    // Gather: gin[iy][ix] = sum over (co, kh, kw) of go[iy*s+kh-p][ix*s+kw-p] * w
    let gind = gin.data_mut();
    let gwd = gw.data_mut();
    for img in 0..n {
        for ci in 0..cin {
            for co in 0..cout {
                let in_plane = ((img * cin + ci) * h) * w;
                let out_plane = ((img * cout + co) * oh) * ow;
                for dkh in 0..kh {
                    let (iy_lo, iy_hi) = out_range(h, oh, stride, padding, dkh);
                    for dkw in 0..kw {
                        let widx = ((ci * cout + co) * kh + dkh) * kw + dkw;
                        let wv = wd[widx];
                        let (ix_lo, ix_hi) = out_range(w, ow, stride, padding, dkw);
                        if ix_lo >= ix_hi {
                            continue;
                        }
                        let mut wacc = 0f64;
                        for iy in iy_lo..iy_hi {
                            let oy = iy * stride + dkh - padding;
                            let in_row = in_plane + iy * w;
                            let out_row = out_plane + oy * ow;
                            if stride == 1 {
                                let ox0 = ix_lo + dkw - padding;
                                let len = ix_hi - ix_lo;
                                let go_row = &god[out_row + ox0..out_row + ox0 + len];
                                let gi = &mut gind[in_row + ix_lo..in_row + ix_lo + len];
                                let xr = &xd[in_row + ix_lo..in_row + ix_lo + len];
                                let mut dot = 0f32;
                                for i in 0..len {
                                    gi[i] += wv * go_row[i];
                                    dot += go_row[i] * xr[i];
                                }
                                wacc += dot as f64;
                            } else {
                                let mut dot = 0f32;
                                for ix in ix_lo..ix_hi {
                                    let ox = ix * stride + dkw - padding;
                                    let g = god[out_row + ox];
                                    gind[in_row + ix] += wv * g;
                                    dot += g * xd[in_row + ix];
                                }
                                wacc += dot as f64;
                            }
                        }
                        gwd[widx] += wacc as f32;
                    }
                }
            }
        }
    }
    Ok((gin, gw, gb))
}

/// Leaky ReLU with negative slope 0.2. The gradient at exactly 0 uses slope 1.
pub fn lrelu(input: &Tensor) -> Tensor {
    input.map(|v| if v >= 0.0 { v } else { LRELU_SLOPE * v })
}

pub fn lrelu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x < 0.0 {
            *gv *= LRELU_SLOPE;
        }
    }
    g
}

/// Mean squared error, accumulated in f64.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.check_same_shape(target, "mse")?;
    let mut acc = 0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = (p - t) as f64;
        acc += d * d;
    }
    Ok(acc / pred.len() as f64)
}

/// d(mse)/d(pred) = 2 (pred - target) / count.
pub fn mse_backward(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.check_same_shape(target, "mse_backward")?;
    let k = 2.0 / pred.len() as f32;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| k * (p - t))
        .collect();
    Tensor::from_vec(pred.shape(), data)
}

/// 2x average-pool downsampling (H, W must be even).
pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "avg_pool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros([n, c, h / 2, w / 2]);
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let s = input.at(img, ch, 2 * y, 2 * x)
                        + input.at(img, ch, 2 * y, 2 * x + 1)
                        + input.at(img, ch, 2 * y + 1, 2 * x)
                        + input.at(img, ch, 2 * y + 1, 2 * x + 1);
                    out.set(img, ch, y, x, s * 0.25);
                }
            }
        }
    }
    Ok(out)
}

/// 2x nearest-neighbor upsampling.
pub fn upsample_nearest2(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, h * 2, w * 2]);
    for img in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.set(img, ch, y, x, input.at(img, ch, y / 2, x / 2));
                }
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(input: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("resize target must be nonzero".to_string()));
    }
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for img in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let wy = fy - y0 as f32;
                for x in 0..ow {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wx = fx - x0 as f32;
                    let v = (1.0 - wy) * (1.0 - wx) * input.at(img, ch, y0, x0)
                        + (1.0 - wy) * wx * input.at(img, ch, y0, x1)
                        + wy * (1.0 - wx) * input.at(img, ch, y1, x0)
                        + wy * wx * input.at(img, ch, y1, x1);
                    out.set(img, ch, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

pub fn flip_h(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(img, ch, y, x, input.at(img, ch, y, w - 1 - x));
                }
            }
        }
    }
    out
}

pub fn flip_v(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(img, ch, y, x, input.at(img, ch, h - 1 - y, x));
                }
            }
        }
    }
    out
}

pub fn crop(input: &Tensor, y0: usize, x0: usize, ch_h: usize, ch_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if y0 + ch_h > h || x0 + ch_w > w {
        return Err(Error::invalid(format!(
            "crop {ch_h}x{ch_w} at ({y0},{x0}) exceeds image {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros([n, c, ch_h, ch_w]);
    for img in 0..n {
        for ch in 0..c {
            for y in 0..ch_h {
                for x in 0..ch_w {
                    out.set(img, ch, y, x, input.at(img, ch, y0 + y, x0 + x));
                }
            }
        }
    }
    Ok(out)
}

/// Channel-axis concatenation.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if n != nb || h != hb || w != wb {
        return Err(Error::shape(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    let plane = h * w;
    for img in 0..n {
        let dst = &mut out.data_mut()[img * (ca + cb) * plane..];
        dst[..ca * plane].copy_from_slice(&a.data()[img * ca * plane..(img + 1) * ca * plane]);
        dst[ca * plane..(ca + cb) * plane]
            .copy_from_slice(&b.data()[img * cb * plane..(img + 1) * cb * plane]);
    }
    Ok(out)
}

/// Channel-axis slice [c0, c1).
pub fn slice_channels(t: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
    let [n, c, h, w] = t.shape();
    if c0 >= c1 || c1 > c {
        return Err(Error::invalid(format!(
            "slice_channels [{c0},{c1}) out of range for {c} channels"
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros([n, c1 - c0, h, w]);
    for img in 0..n {
        let src = &t.data()[(img * c + c0) * plane..(img * c + c1) * plane];
        out.data_mut()[img * (c1 - c0) * plane..(img + 1) * (c1 - c0) * plane]
            .copy_from_slice(src);
    }
    Ok(out)
}

/// Stack single-sample tensors along the batch axis.
pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("stack_batch: empty".to_string()))?;
    let [n, c, h, w] = first.shape();
    if n != 1 {
        return Err(Error::invalid("stack_batch expects batch-1 items".to_string()));
    }
    let mut out = Tensor::zeros([items.len(), c, h, w]);
    let plane = c * h * w;
    for (i, item) in items.iter().enumerate() {
        item.check_same_shape(first, "stack_batch")?;
        out.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(item.data());
    }
    Ok(out)
}
