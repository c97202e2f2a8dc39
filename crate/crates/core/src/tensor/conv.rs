//! Convolution, transposed convolution and mask-window kernels.
//!
//! All kernels accumulate taps in a fixed row-major order over
//! `(in_channel, kernel_row, kernel_col)` so results are bit-reproducible
//! across runs. Inputs are zero padded into a scratch buffer first, which
//! keeps the inner loops free of bounds arithmetic.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Output extent of a cross-correlation along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let reach = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < reach {
        return None;
    }
    Some((padded - reach) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn tconv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

fn check_conv_args(stride: usize, dilation: usize) -> Result<()> {
    if stride == 0 || dilation == 0 {
        return Err(Error::invalid("stride and dilation must be positive"));
    }
    Ok(())
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    check_conv_args(stride, dilation)?;
    let (xs, ws) = (x.shape(), w.shape());
    if ws.channels != xs.channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weights expect {}", xs.channels, ws.channels),
        ));
    }
    let out_h = conv_output_len(xs.height, ws.height, stride, dilation, pad);
    let out_w = conv_output_len(xs.width, ws.width, stride, dilation, pad);
    match (out_h, out_w) {
        (Some(h), Some(w2)) if h > 0 && w2 > 0 => Ok((h, w2)),
        _ => Err(Error::shape(
            "conv2d",
            format!(
                "zero-size output for input {} with kernel {}x{}, stride {stride}, dilation {dilation}, pad {pad}",
                xs, ws.height, ws.width
            ),
        )),
    }
}

/// Standard cross-correlation with zero padding.
///
/// `w` is `(out_channels, in_channels, kh, kw)`, `bias` is one value per
/// output channel.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (out_h, out_w) = conv_geometry(x, w, stride, dilation, pad)?;
    let xs = x.shape();
    let ws = w.shape();
    if let Some(b) = bias {
        if b.len() != ws.batch {
            return Err(Error::shape(
                "conv2d bias",
                format!("{} biases for {} output channels", b.len(), ws.batch),
            ));
        }
    }
    let xp = x.pad_spatial(pad);
    let out_shape = Shape::new(xs.batch, ws.batch, out_h, out_w);
    let mut out = Tensor::zeros(out_shape);

    for b in 0..xs.batch {
        for oc in 0..ws.batch {
            for ic in 0..ws.channels {
                for kh in 0..ws.height {
                    for kw in 0..ws.width {
                        let wv = w.at(oc, ic, kh, kw);
                        if wv == T::zero() {
                            continue;
                        }
                        for oh in 0..out_h {
                            let ih = oh * stride + kh * dilation;
                            let xrow = xp.row(b, ic, ih);
                            let orow = out.row_mut(b, oc, oh);
                            let base = kw * dilation;
                            if stride == 1 {
                                for (o, &xv) in orow.iter_mut().zip(&xrow[base..base + out_w]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (ow, o) in orow.iter_mut().enumerate() {
                                    *o += wv * xrow[ow * stride + base];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bv) = bias {
                let add = bv[oc];
                for oh in 0..out_h {
                    for o in out.row_mut(b, oc, oh) {
                        *o += add;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dilation: usize,
    pad: usize,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    check_conv_args(stride, dilation)?;
    let gs = grad.shape();
    let ws = w.shape();
    let padded = Shape::new(
        input_shape.batch,
        input_shape.channels,
        input_shape.height + 2 * pad,
        input_shape.width + 2 * pad,
    );
    let mut dxp = Tensor::zeros(padded);

    for b in 0..gs.batch {
        for oc in 0..ws.batch {
            for ic in 0..ws.channels {
                for kh in 0..ws.height {
                    for kw in 0..ws.width {
                        let wv = w.at(oc, ic, kh, kw);
                        if wv == T::zero() {
                            continue;
                        }
                        for oh in 0..gs.height {
                            let ih = oh * stride + kh * dilation;
                            let grow = grad.row(b, oc, oh);
                            let drow = dxp.row_mut(b, ic, ih);
                            let base = kw * dilation;
                            if stride == 1 {
                                for (d, &gv) in drow[base..base + gs.width].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (ow, &gv) in grow.iter().enumerate() {
                                    drow[ow * stride + base] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if pad == 0 {
        Ok(dxp)
    } else {
        dxp.crop_spatial(pad)
    }
}

/// Gradient of `conv2d` with respect to its weights.
pub fn conv2d_backward_weights<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    stride: usize,
    dilation: usize,
    pad: usize,
    weight_shape: Shape,
) -> Result<Tensor<T>> {
    check_conv_args(stride, dilation)?;
    let gs = grad.shape();
    let xp = x.pad_spatial(pad);
    let mut dw = Tensor::zeros(weight_shape);

    for oc in 0..weight_shape.batch {
        for ic in 0..weight_shape.channels {
            for kh in 0..weight_shape.height {
                for kw in 0..weight_shape.width {
                    let mut acc = T::zero();
                    for b in 0..gs.batch {
                        for oh in 0..gs.height {
                            let ih = oh * stride + kh * dilation;
                            let xrow = xp.row(b, ic, ih);
                            let grow = grad.row(b, oc, oh);
                            let base = kw * dilation;
                            if stride == 1 {
                                for (&gv, &xv) in grow.iter().zip(&xrow[base..base + gs.width]) {
                                    acc += gv * xv;
                                }
                            } else {
                                for (ow, &gv) in grow.iter().enumerate() {
                                    acc += gv * xrow[ow * stride + base];
                                }
                            }
                        }
                    }
                    dw.set(oc, ic, kh, kw, acc);
                }
            }
        }
    }
    Ok(dw)
}

/// Gradient of `conv2d` with respect to its per-channel bias.
pub fn conv2d_backward_bias<T: Scalar>(grad: &Tensor<T>) -> Vec<T> {
    let gs = grad.shape();
    let mut db = vec![T::zero(); gs.channels];
    for b in 0..gs.batch {
        for (oc, slot) in db.iter_mut().enumerate() {
            for oh in 0..gs.height {
                for &g in grad.row(b, oc, oh) {
                    *slot += g;
                }
            }
        }
    }
    db
}

/// Transposed convolution (the adjoint of `conv2d` at dilation one).
///
/// `w` is `(in_channels, out_channels, kh, kw)`, so a weight tensor used by
/// `conv2d` can be passed here unchanged to realize the adjoint pairing
/// `<conv2d(x), y> == <x, transposed_conv2d(y)>`.
pub fn transposed_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_conv_args(stride, 1)?;
    let xs = x.shape();
    let ws = w.shape();
    if ws.batch != xs.channels {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("input has {} channels, weights expect {}", xs.channels, ws.batch),
        ));
    }
    let out_c = ws.channels;
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(Error::shape(
                "transposed_conv2d bias",
                format!("{} biases for {out_c} output channels", b.len()),
            ));
        }
    }
    let (out_h, out_w) = match (
        tconv_output_len(xs.height, ws.height, stride, pad),
        tconv_output_len(xs.width, ws.width, stride, pad),
    ) {
        (Some(h), Some(w2)) => (h, w2),
        _ => {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("zero-size output for input {xs} with stride {stride}, pad {pad}"),
            ))
        }
    };

    let full = Shape::new(
        xs.batch,
        out_c,
        (xs.height - 1) * stride + ws.height,
        (xs.width - 1) * stride + ws.width,
    );
    let mut yp = Tensor::zeros(full);
    for b in 0..xs.batch {
        for oc in 0..out_c {
            for ic in 0..xs.channels {
                for kh in 0..ws.height {
                    for kw in 0..ws.width {
                        let wv = w.at(ic, oc, kh, kw);
                        if wv == T::zero() {
                            continue;
                        }
                        for ih in 0..xs.height {
                            let xrow = x.row(b, ic, ih);
                            let yrow = yp.row_mut(b, oc, ih * stride + kh);
                            for (iw, &xv) in xrow.iter().enumerate() {
                                yrow[iw * stride + kw] += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = if pad == 0 { yp } else { yp.crop_spatial(pad)? };
    debug_assert_eq!(out.shape().spatial(), (out_h, out_w));
    if let Some(bv) = bias {
        for b in 0..xs.batch {
            for oc in 0..out_c {
                let add = bv[oc];
                for oh in 0..out_h {
                    for o in out.row_mut(b, oc, oh) {
                        *o += add;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `transposed_conv2d` with respect to its input.
pub fn tconv_backward_input<T: Scalar>(
    grad: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    let ws = w.shape();
    let gp = grad.pad_spatial(pad);
    let mut dx = Tensor::zeros(input_shape);
    for b in 0..input_shape.batch {
        for ic in 0..input_shape.channels {
            for oc in 0..ws.channels {
                for kh in 0..ws.height {
                    for kw in 0..ws.width {
                        let wv = w.at(ic, oc, kh, kw);
                        if wv == T::zero() {
                            continue;
                        }
                        for ih in 0..input_shape.height {
                            let grow = gp.row(b, oc, ih * stride + kh);
                            let drow = dx.row_mut(b, ic, ih);
                            for (iw, d) in drow.iter_mut().enumerate() {
                                *d += wv * grow[iw * stride + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Gradient of `transposed_conv2d` with respect to its weights.
pub fn tconv_backward_weights<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    stride: usize,
    pad: usize,
    weight_shape: Shape,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let gp = grad.pad_spatial(pad);
    let mut dw = Tensor::zeros(weight_shape);
    for ic in 0..weight_shape.batch {
        for oc in 0..weight_shape.channels {
            for kh in 0..weight_shape.height {
                for kw in 0..weight_shape.width {
                    let mut acc = T::zero();
                    for b in 0..xs.batch {
                        for ih in 0..xs.height {
                            let xrow = x.row(b, ic, ih);
                            let grow = gp.row(b, oc, ih * stride + kh);
                            for (iw, &xv) in xrow.iter().enumerate() {
                                acc += xv * grow[iw * stride + kw];
                            }
                        }
                    }
                    dw.set(ic, oc, kh, kw, acc);
                }
            }
        }
    }
    Ok(dw)
}

/// Gradient of `transposed_conv2d` with respect to its per-channel bias.
pub fn tconv_backward_bias<T: Scalar>(grad: &Tensor<T>) -> Vec<T> {
    conv2d_backward_bias(grad)
}

fn check_binary<T: Scalar>(o: &Tensor<T>) -> Result<()> {
    for (i, &v) in o.data().iter().enumerate() {
        if v != T::zero() && v != T::one() {
            return Err(Error::NonBinaryMask {
                value: v.as_f64(),
                index: i,
            });
        }
    }
    Ok(())
}

/// Validity-mask propagation: max over the dilated window at every output
/// position, using the same geometry as the paired convolution. The input
/// must be binary; the output stays binary.
pub fn max_pool_window<T: Scalar>(
    o: &Tensor<T>,
    half_kernel: usize,
    dilation: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_binary(o)?;
    let counts = valid_counts_unchecked(o, half_kernel, dilation, stride, pad)?;
    Ok(counts.map(|c| if c >= T::one() { T::one() } else { T::zero() }))
}

/// Number of 1-valued taps in each dilated window; the denominator counts of
/// the sparsity-invariant convolution.
pub fn window_valid_count<T: Scalar>(
    o: &Tensor<T>,
    half_kernel: usize,
    dilation: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_binary(o)?;
    valid_counts_unchecked(o, half_kernel, dilation, stride, pad)
}

fn valid_counts_unchecked<T: Scalar>(
    o: &Tensor<T>,
    half_kernel: usize,
    dilation: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_conv_args(stride, dilation)?;
    let k = 2 * half_kernel + 1;
    let os = o.shape();
    let (out_h, out_w) = match (
        conv_output_len(os.height, k, stride, dilation, pad),
        conv_output_len(os.width, k, stride, dilation, pad),
    ) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::shape(
                "mask window",
                format!("zero-size output for mask {os} with k={half_kernel}, dilation {dilation}, stride {stride}, pad {pad}"),
            ))
        }
    };
    let op = o.pad_spatial(pad);
    let mut out = Tensor::zeros(Shape::new(os.batch, os.channels, out_h, out_w));
    for b in 0..os.batch {
        for c in 0..os.channels {
            for kh in 0..k {
                for kw in 0..k {
                    for oh in 0..out_h {
                        let ih = oh * stride + kh * dilation;
                        let orow = op.row(b, c, ih);
                        let dst = out.row_mut(b, c, oh);
                        let base = kw * dilation;
                        if stride == 1 {
                            for (d, &v) in dst.iter_mut().zip(&orow[base..base + out_w]) {
                                *d += v;
                            }
                        } else {
                            for (ow, d) in dst.iter_mut().enumerate() {
                                *d += orow[ow * stride + base];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
