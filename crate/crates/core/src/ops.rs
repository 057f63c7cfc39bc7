//! Layer kernels: forward and exact backward functions over plain tensors.
//!
//! Each kernel validates shapes, computes the forward value, and has a
//! matching `*_backward` that produces gradients for whichever arguments
//! the caller asks for. The autodiff tape wires these together; inference
//! paths call the forward functions directly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Probabilities below this are clamped inside the cross-entropy log.
pub const LOG_CLAMP: f64 = 1e-12;

#[inline]
fn axpy<S: Scalar>(y: &mut [S], x: &[S], a: S) {
    debug_assert_eq!(y.len(), x.len());
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + a * x;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&a, &b) in a.iter().zip(b) {
        acc = acc + a * b;
    }
    acc
}

/// Interprets a rank-1 or rank-2 tensor as a (rows, cols) matrix.
fn as_rows<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [d] => Ok((1, *d)),
        [b, d] => Ok((*b, *d)),
        other => Err(Error::Dimension(format!(
            "{what} must be rank 1 or 2, got shape {other:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Fully-connected layer
// ---------------------------------------------------------------------------

/// `out[b,k] = Σ_d input[b,d]·weight[d,k] + bias[k]`.
///
/// A rank-1 input is treated as a single row and yields a rank-1 output.
pub fn affine<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (batch, in_dim) = as_rows(input, "affine input")?;
    let (w_in, w_out) = match weight.shape() {
        [d, k] => (*d, *k),
        other => {
            return Err(Error::Dimension(format!(
                "affine weight must be rank 2, got shape {other:?}"
            )))
        }
    };
    if in_dim != w_in {
        return Err(Error::Dimension(format!(
            "affine input shape {:?} does not match weight shape {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if bias.shape() != [w_out] {
        return Err(Error::Dimension(format!(
            "affine bias shape {:?} does not match weight shape {:?}",
            bias.shape(),
            weight.shape()
        )));
    }
    let mut out = vec![S::zero(); batch * w_out];
    let w = weight.data();
    let x = input.data();
    for b in 0..batch {
        let row = &mut out[b * w_out..(b + 1) * w_out];
        row.copy_from_slice(bias.data());
        for d in 0..in_dim {
            let xv = x[b * in_dim + d];
            if xv != S::zero() {
                axpy(row, &w[d * w_out..(d + 1) * w_out], xv);
            }
        }
    }
    let shape = if input.rank() == 1 {
        vec![w_out]
    } else {
        vec![batch, w_out]
    };
    Ok(Tensor::from_raw(shape, out))
}

/// Gradients of [`affine`] w.r.t. (input, weight, bias), computed on demand.
pub fn affine_backward<S: Scalar>(
    grad_out: &[S],
    input: &Tensor<S>,
    weight: &Tensor<S>,
    want: (bool, bool, bool),
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let (batch, in_dim) = as_rows(input, "affine input").expect("validated in forward");
    let w_out = weight.shape()[1];
    debug_assert_eq!(grad_out.len(), batch * w_out);
    let x = input.data();
    let w = weight.data();

    let d_input = want.0.then(|| {
        let mut dx = vec![S::zero(); batch * in_dim];
        for b in 0..batch {
            let g = &grad_out[b * w_out..(b + 1) * w_out];
            let dx_row = &mut dx[b * in_dim..(b + 1) * in_dim];
            for d in 0..in_dim {
                dx_row[d] = dot(g, &w[d * w_out..(d + 1) * w_out]);
            }
        }
        dx
    });
    let d_weight = want.1.then(|| {
        let mut dw = vec![S::zero(); in_dim * w_out];
        for b in 0..batch {
            let g = &grad_out[b * w_out..(b + 1) * w_out];
            for d in 0..in_dim {
                let xv = x[b * in_dim + d];
                if xv != S::zero() {
                    axpy(&mut dw[d * w_out..(d + 1) * w_out], g, xv);
                }
            }
        }
        dw
    });
    let d_bias = want.2.then(|| {
        let mut db = vec![S::zero(); w_out];
        for b in 0..batch {
            axpy(&mut db, &grad_out[b * w_out..(b + 1) * w_out], S::one());
        }
        db
    });
    (d_input, d_weight, d_bias)
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation semantics)
// ---------------------------------------------------------------------------

/// Shape bookkeeping for conv/pool over rank-3 `[C,H,W]` or rank-4
/// `[B,C,H,W]` inputs.
#[derive(Debug, Clone, Copy)]
struct ImageDims {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    batched: bool,
}

fn image_dims<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<ImageDims> {
    match *t.shape() {
        [c, h, w] => Ok(ImageDims {
            batch: 1,
            channels: c,
            height: h,
            width: w,
            batched: false,
        }),
        [b, c, h, w] => Ok(ImageDims {
            batch: b,
            channels: c,
            height: h,
            width: w,
            batched: true,
        }),
        ref other => Err(Error::Dimension(format!(
            "{what} must be rank 3 [C,H,W] or rank 4 [B,C,H,W], got {other:?}"
        ))),
    }
}

struct ConvDims {
    input: ImageDims,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    out_h: usize,
    out_w: usize,
    pad_h: usize,
    pad_w: usize,
}

fn conv_dims<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let dims = image_dims(input, "conv2d input")?;
    let (c_out, c_in, kh, kw) = match *kernels.shape() {
        [o, i, kh, kw] => (o, i, kh, kw),
        ref other => {
            return Err(Error::Dimension(format!(
                "conv2d kernels must be rank 4 [C_out,C_in,k,k], got {other:?}"
            )))
        }
    };
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be positive".into()));
    }
    if c_in != dims.channels {
        return Err(Error::Dimension(format!(
            "conv2d input shape {:?} has {} channels but kernels {:?} expect {c_in}",
            input.shape(),
            dims.channels,
            kernels.shape()
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Dimension(format!(
            "conv2d bias shape {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    let ph = dims.height + 2 * pad;
    let pw = dims.width + 2 * pad;
    if ph < kh || pw < kw {
        return Err(Error::Dimension(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        )));
    }
    Ok(ConvDims {
        input: dims,
        out_channels: c_out,
        kernel_h: kh,
        kernel_w: kw,
        out_h: (ph - kh) / stride + 1,
        out_w: (pw - kw) / stride + 1,
        pad_h: ph,
        pad_w: pw,
    })
}

fn pad_image<S: Scalar>(src: &[S], d: &ImageDims, pad: usize, dst: &mut [S]) {
    let pw = d.width + 2 * pad;
    dst.fill(S::zero());
    for c in 0..d.channels {
        for y in 0..d.height {
            let s = c * d.height * d.width + y * d.width;
            let t = c * (d.height + 2 * pad) * pw + (y + pad) * pw + pad;
            dst[t..t + d.width].copy_from_slice(&src[s..s + d.width]);
        }
    }
}

/// 2-D convolution with `stride` and zero `pad`.
///
/// Output height is `floor((H+2·pad−k)/stride)+1`, same for width.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let d = conv_dims(input, kernels, bias, stride, pad)?;
    let ImageDims {
        batch,
        channels,
        height,
        width,
        batched,
    } = d.input;
    let (c_out, kh, kw) = (d.out_channels, d.kernel_h, d.kernel_w);
    let (oh, ow) = (d.out_h, d.out_w);
    let in_plane = channels * height * width;
    let out_plane = c_out * oh * ow;
    let k = kernels.data();

    let mut out = vec![S::zero(); batch * out_plane];
    let mut padded = (pad > 0).then(|| vec![S::zero(); channels * d.pad_h * d.pad_w]);
    for b in 0..batch {
        let src = &input.data()[b * in_plane..(b + 1) * in_plane];
        let (img, ih, iw): (&[S], usize, usize) = match padded.as_mut() {
            Some(buf) => {
                pad_image(src, &d.input, pad, buf);
                (buf, d.pad_h, d.pad_w)
            }
            None => (src, height, width),
        };
        let out_b = &mut out[b * out_plane..(b + 1) * out_plane];
        for co in 0..c_out {
            let out_c = &mut out_b[co * oh * ow..(co + 1) * oh * ow];
            for row in out_c.chunks_exact_mut(ow) {
                row.fill(bias.data()[co]);
            }
            for ci in 0..channels {
                let img_c = &img[ci * ih * iw..(ci + 1) * ih * iw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let weight = k[((co * channels + ci) * kh + ky) * kw + kx];
                        if weight == S::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            let in_row = &img_c[iy * iw + kx..];
                            let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                axpy(out_row, &in_row[..ow], weight);
                            } else {
                                for (o, x) in out_row.iter_mut().zip(in_row.iter().step_by(stride))
                                {
                                    *o = *o + weight * *x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = if batched {
        vec![batch, c_out, oh, ow]
    } else {
        vec![c_out, oh, ow]
    };
    Ok(Tensor::from_raw(shape, out))
}

/// Gradients of [`conv2d`] w.r.t. (input, kernels, bias).
pub fn conv2d_backward<S: Scalar>(
    grad_out: &[S],
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let bias_stub = Tensor::zeros(vec![kernels.shape()[0]]);
    let d = conv_dims(input, kernels, &bias_stub, stride, pad).expect("validated in forward");
    let ImageDims {
        batch,
        channels,
        height,
        width,
        ..
    } = d.input;
    let (c_out, kh, kw) = (d.out_channels, d.kernel_h, d.kernel_w);
    let (oh, ow) = (d.out_h, d.out_w);
    let (ih, iw) = if pad > 0 {
        (d.pad_h, d.pad_w)
    } else {
        (height, width)
    };
    let in_plane = channels * height * width;
    let out_plane = c_out * oh * ow;
    let k = kernels.data();
    debug_assert_eq!(grad_out.len(), batch * out_plane);

    let mut d_input = want.0.then(|| vec![S::zero(); batch * in_plane]);
    let mut d_kernels = want.1.then(|| vec![S::zero(); k.len()]);
    let mut d_bias = want.2.then(|| vec![S::zero(); c_out]);

    let mut padded = (pad > 0 && want.1).then(|| vec![S::zero(); channels * ih * iw]);
    let mut d_padded = (pad > 0 && want.0).then(|| vec![S::zero(); channels * ih * iw]);

    for b in 0..batch {
        let g_b = &grad_out[b * out_plane..(b + 1) * out_plane];
        if let Some(db) = d_bias.as_mut() {
            for co in 0..c_out {
                let mut acc = S::zero();
                for &g in &g_b[co * oh * ow..(co + 1) * oh * ow] {
                    acc = acc + g;
                }
                db[co] = db[co] + acc;
            }
        }
        if let Some(dk) = d_kernels.as_mut() {
            let src = &input.data()[b * in_plane..(b + 1) * in_plane];
            let img: &[S] = match padded.as_mut() {
                Some(buf) => {
                    pad_image(src, &d.input, pad, buf);
                    buf
                }
                None => src,
            };
            for co in 0..c_out {
                let g_c = &g_b[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..channels {
                    let img_c = &img[ci * ih * iw..(ci + 1) * ih * iw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = S::zero();
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                let in_row = &img_c[iy * iw + kx..];
                                let g_row = &g_c[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    acc = acc + dot(g_row, &in_row[..ow]);
                                } else {
                                    for (g, x) in g_row.iter().zip(in_row.iter().step_by(stride)) {
                                        acc = acc + *g * *x;
                                    }
                                }
                            }
                            let idx = ((co * channels + ci) * kh + ky) * kw + kx;
                            dk[idx] = dk[idx] + acc;
                        }
                    }
                }
            }
        }
        if let Some(di) = d_input.as_mut() {
            let scratch: &mut [S] = match d_padded.as_mut() {
                Some(buf) => {
                    buf.fill(S::zero());
                    buf
                }
                None => &mut di[b * in_plane..(b + 1) * in_plane],
            };
            for co in 0..c_out {
                let g_c = &g_b[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..channels {
                    let base = ci * ih * iw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let weight = k[((co * channels + ci) * kh + ky) * kw + kx];
                            if weight == S::zero() {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                let row = &mut scratch[base + iy * iw + kx..];
                                let g_row = &g_c[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    axpy(&mut row[..ow], g_row, weight);
                                } else {
                                    for (g, x) in
                                        g_row.iter().zip(row.iter_mut().step_by(stride))
                                    {
                                        *x = *x + weight * *g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(buf) = d_padded.as_ref() {
                // crop the padded gradient back to the input extent
                let di_b = &mut di[b * in_plane..(b + 1) * in_plane];
                for ci in 0..channels {
                    for y in 0..height {
                        let s = ci * ih * iw + (y + pad) * iw + pad;
                        let t = ci * height * width + y * width;
                        di_b[t..t + width].copy_from_slice(&buf[s..s + width]);
                    }
                }
            }
        }
    }
    (d_input, d_kernels, d_bias)
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// Max over `window`×`window` cells stepped by `stride`.
pub fn maxpool2d<S: Scalar>(input: &Tensor<S>, window: usize, stride: usize) -> Result<Tensor<S>> {
    maxpool2d_with_argmax(input, window, stride).map(|(t, _)| t)
}

/// Like [`maxpool2d`] but also returns, per output cell, the flat input
/// index of the max (first occurrence in row-major order on ties) for the
/// backward pass.
pub fn maxpool2d_with_argmax<S: Scalar>(
    input: &Tensor<S>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<S>, Vec<u32>)> {
    let d = image_dims(input, "maxpool2d input")?;
    if window == 0 || stride == 0 {
        return Err(Error::Parameter(
            "maxpool2d window and stride must be positive".into(),
        ));
    }
    if window > d.height || window > d.width {
        return Err(Error::Dimension(format!(
            "maxpool2d window {window} exceeds input extent {}x{}",
            d.height, d.width
        )));
    }
    let oh = (d.height - window) / stride + 1;
    let ow = (d.width - window) / stride + 1;
    let x = input.data();
    debug_assert!(x.len() <= u32::MAX as usize);
    let mut out = Vec::with_capacity(d.batch * d.channels * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..d.batch {
        for c in 0..d.channels {
            let plane = (b * d.channels + c) * d.height * d.width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0u32;
                    for wy in 0..window {
                        let row = plane + (oy * stride + wy) * d.width + ox * stride;
                        for wx in 0..window {
                            let v = x[row + wx];
                            if v > best {
                                best = v;
                                best_idx = (row + wx) as u32;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    let shape = if d.batched {
        vec![d.batch, d.channels, oh, ow]
    } else {
        vec![d.channels, oh, ow]
    };
    Ok((Tensor::from_raw(shape, out), argmax))
}

/// Routes each output-cell gradient to the recorded argmax input cell.
pub fn maxpool2d_backward<S: Scalar>(grad_out: &[S], argmax: &[u32], input_len: usize) -> Vec<S> {
    debug_assert_eq!(grad_out.len(), argmax.len());
    let mut d_input = vec![S::zero(); input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        let idx = idx as usize;
        d_input[idx] = d_input[idx] + g;
    }
    d_input
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| v.max(S::zero()))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<S: Scalar>(grad_out: &[S], input: &Tensor<S>) -> Vec<S> {
    debug_assert_eq!(grad_out.len(), input.len());
    grad_out
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
        .collect()
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1/(1−rate)`; in
/// inference mode this is the identity.
pub fn dropout<S: Scalar>(
    input: &Tensor<S>,
    rate: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Tensor<S>> {
    dropout_with_mask(input, rate, rng, training).map(|(t, _)| t)
}

/// Dropout that also returns the per-element multiplier for backward.
pub fn dropout_with_mask<S: Scalar>(
    input: &Tensor<S>,
    rate: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<(Tensor<S>, Option<Vec<S>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must satisfy 0 <= rate < 1, got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep_scale = S::of(1.0 / (1.0 - rate));
    let mult: Vec<S> = input
        .data()
        .iter()
        .map(|_| {
            if rng.gen::<f64>() < rate {
                S::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let data = input
        .data()
        .iter()
        .zip(&mult)
        .map(|(&x, &m)| x * m)
        .collect();
    Ok((Tensor::from_raw(input.shape().to_vec(), data), Some(mult)))
}

pub fn dropout_backward<S: Scalar>(grad_out: &[S], mult: &[S]) -> Vec<S> {
    debug_assert_eq!(grad_out.len(), mult.len());
    grad_out.iter().zip(mult).map(|(&g, &m)| g * m).collect()
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Max-shifted softmax over the last axis of a rank-1 or rank-2 tensor.
pub fn softmax<S: Scalar>(z: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = as_rows(z, "softmax input")?;
    if cols == 0 {
        return Err(Error::Dimension("softmax over empty axis".into()));
    }
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &z.data()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut sum = S::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(Tensor::from_raw(z.shape().to_vec(), out))
}

/// `dz_j = s_j·(g_j − Σ_k g_k·s_k)` per row, where `s` is the forward output.
pub fn softmax_backward<S: Scalar>(grad_out: &[S], output: &Tensor<S>) -> Vec<S> {
    let (rows, cols) = as_rows(output, "softmax output").expect("validated in forward");
    debug_assert_eq!(grad_out.len(), rows * cols);
    let mut dz = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let s = &output.data()[r * cols..(r + 1) * cols];
        let g = &grad_out[r * cols..(r + 1) * cols];
        let inner = dot(g, s);
        for ((d, &sv), &gv) in dz[r * cols..(r + 1) * cols].iter_mut().zip(s).zip(g) {
            *d = sv * (gv - inner);
        }
    }
    dz
}

fn validate_ce_inputs<S: Scalar>(f: &Tensor<S>, y: &Tensor<S>) -> Result<(usize, usize)> {
    let (rows, cols) = as_rows(f, "cross-entropy probabilities")?;
    if f.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "probability shape {:?} does not match label shape {:?}",
            f.shape(),
            y.shape()
        )));
    }
    let tol = S::of(1e-6);
    for r in 0..rows {
        let f_row = &f.data()[r * cols..(r + 1) * cols];
        let sum: S = f_row.iter().copied().sum();
        if (sum - S::one()).abs() > tol {
            return Err(Error::Input(format!(
                "probability row {r} sums to {sum}, expected 1 within 1e-6"
            )));
        }
        let y_row = &y.data()[r * cols..(r + 1) * cols];
        let ones = y_row.iter().filter(|&&v| v == S::one()).count();
        let zeros = y_row.iter().filter(|&&v| v == S::zero()).count();
        if ones != 1 || ones + zeros != cols {
            return Err(Error::Input(format!(
                "label row {r} is not one-hot: {y_row:?}"
            )));
        }
    }
    Ok((rows, cols))
}

/// Mean negative log-likelihood of one-hot labels under the given
/// probability rows, with the log clamped at `LOG_CLAMP`.
pub fn cross_entropy_loss<S: Scalar>(f: &Tensor<S>, y: &Tensor<S>) -> Result<S> {
    let (rows, cols) = validate_ce_inputs(f, y)?;
    let clamp = S::of(LOG_CLAMP);
    let mut total = S::zero();
    for (fv, yv) in f.data().iter().zip(y.data()) {
        if *yv == S::one() {
            total = total - fv.max(clamp).ln();
        }
    }
    let _ = cols;
    Ok(total / S::of(rows as f64))
}

/// Exact gradient of [`cross_entropy_loss`] w.r.t. the probabilities,
/// including the zero branch where the clamp was active.
pub fn cross_entropy_backward<S: Scalar>(f: &Tensor<S>, y: &Tensor<S>) -> Vec<S> {
    let (rows, _) = as_rows(f, "cross-entropy probabilities").expect("validated in forward");
    let clamp = S::of(LOG_CLAMP);
    let scale = S::one() / S::of(rows as f64);
    f.data()
        .iter()
        .zip(y.data())
        .map(|(&fv, &yv)| {
            if yv == S::one() && fv > clamp {
                -scale / fv
            } else {
                S::zero()
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fusion-specific kernels
// ---------------------------------------------------------------------------

/// Concatenates rank-2 tensors along the column axis.
pub fn concat_cols<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Input("concat of an empty list".into()));
    }
    let mut rows = None;
    let mut total = 0;
    for p in parts {
        let (b, d) = as_rows(p, "concat part")?;
        if p.rank() != 2 {
            return Err(Error::Dimension(format!(
                "concat parts must be rank 2, got {:?}",
                p.shape()
            )));
        }
        match rows {
            None => rows = Some(b),
            Some(r) if r == b => {}
            Some(r) => {
                return Err(Error::Dimension(format!(
                    "concat parts disagree on rows: {r} vs {b}"
                )))
            }
        }
        total += d;
    }
    let rows = rows.unwrap();
    let mut out = vec![S::zero(); rows * total];
    let mut col = 0;
    for p in parts {
        let d = p.shape()[1];
        for b in 0..rows {
            out[b * total + col..b * total + col + d]
                .copy_from_slice(&p.data()[b * d..(b + 1) * d]);
        }
        col += d;
    }
    Ok(Tensor::from_raw(vec![rows, total], out))
}

/// Splits a concat gradient back into per-part column blocks.
pub fn concat_cols_backward<S: Scalar>(grad_out: &[S], rows: usize, dims: &[usize]) -> Vec<Vec<S>> {
    let total: usize = dims.iter().sum();
    debug_assert_eq!(grad_out.len(), rows * total);
    let mut grads = Vec::with_capacity(dims.len());
    let mut col = 0;
    for &d in dims {
        let mut g = vec![S::zero(); rows * d];
        for b in 0..rows {
            g[b * d..(b + 1) * d]
                .copy_from_slice(&grad_out[b * total + col..b * total + col + d]);
        }
        grads.push(g);
        col += d;
    }
    grads
}

/// Convex mixture `F[b,c] = Σ_i gate[b,i]·posts[i][b,c]`.
pub fn mix_combine<S: Scalar>(gate: &Tensor<S>, posts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let (batch, experts) = as_rows(gate, "mixture gate")?;
    if posts.len() != experts {
        return Err(Error::Dimension(format!(
            "gate has {experts} columns but {} posteriors were given",
            posts.len()
        )));
    }
    let (_, classes) = as_rows(posts[0], "mixture posterior")?;
    let mut out = vec![S::zero(); batch * classes];
    for (i, p) in posts.iter().enumerate() {
        let (pb, pc) = as_rows(p, "mixture posterior")?;
        if pb != batch || pc != classes {
            return Err(Error::Dimension(format!(
                "posterior {i} shape {:?} does not match [{batch},{classes}]",
                p.shape()
            )));
        }
        for b in 0..batch {
            let g = gate.data()[b * experts + i];
            axpy(
                &mut out[b * classes..(b + 1) * classes],
                &p.data()[b * classes..(b + 1) * classes],
                g,
            );
        }
    }
    let shape = if gate.rank() == 1 {
        vec![classes]
    } else {
        vec![batch, classes]
    };
    Ok(Tensor::from_raw(shape, out))
}

/// Gradients of [`mix_combine`] w.r.t. the gate and each posterior.
pub fn mix_combine_backward<S: Scalar>(
    grad_out: &[S],
    gate: &Tensor<S>,
    posts: &[&Tensor<S>],
    want_gate: bool,
    want_posts: bool,
) -> (Option<Vec<S>>, Option<Vec<Vec<S>>>) {
    let (batch, experts) = as_rows(gate, "mixture gate").expect("validated in forward");
    let classes = posts[0].shape()[posts[0].rank() - 1];
    debug_assert_eq!(grad_out.len(), batch * classes);
    let d_gate = want_gate.then(|| {
        let mut dg = vec![S::zero(); batch * experts];
        for (i, p) in posts.iter().enumerate() {
            for b in 0..batch {
                dg[b * experts + i] = dot(
                    &grad_out[b * classes..(b + 1) * classes],
                    &p.data()[b * classes..(b + 1) * classes],
                );
            }
        }
        dg
    });
    let d_posts = want_posts.then(|| {
        (0..experts)
            .map(|i| {
                let mut dp = vec![S::zero(); batch * classes];
                for b in 0..batch {
                    let g = gate.data()[b * experts + i];
                    axpy(
                        &mut dp[b * classes..(b + 1) * classes],
                        &grad_out[b * classes..(b + 1) * classes],
                        g,
                    );
                }
                dp
            })
            .collect()
    });
    (d_gate, d_posts)
}
