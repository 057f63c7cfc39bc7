//! Small image helpers shared by the data generator, crop extraction and
//! window scoring: bilinear crop-resize and box blur over `[C,H,W]` tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Crops the half-open pixel region `[x0,x1)×[y0,y1)` from a `[C,H,W]`
/// tensor and resizes it to `side`×`side` with bilinear sampling.
pub fn crop_resize<S: Scalar>(
    src: &Tensor<S>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    side: usize,
) -> Result<Tensor<S>> {
    let (c, h, w) = match *src.shape() {
        [c, h, w] => (c, h, w),
        ref other => {
            return Err(Error::Dimension(format!(
                "crop source must be [C,H,W], got {other:?}"
            )))
        }
    };
    if x1 <= x0 || y1 <= y0 || x1 > w || y1 > h {
        return Err(Error::Input(format!(
            "crop region ({x0},{y0})-({x1},{y1}) invalid for {w}x{h} image"
        )));
    }
    let cw = x1 - x0;
    let ch = y1 - y0;
    let sx = cw as f64 / side as f64;
    let sy = ch as f64 / side as f64;
    let data = src.data();
    let mut out = vec![S::zero(); c * side * side];
    for oy in 0..side {
        // pixel-center mapping, clamped to the crop
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(ch - 1);
        let ty = S::of(fy - y_lo as f64);
        for ox in 0..side {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(cw - 1);
            let tx = S::of(fx - x_lo as f64);
            for ci in 0..c {
                let plane = ci * h * w;
                let at = |yy: usize, xx: usize| data[plane + (y0 + yy) * w + (x0 + xx)];
                let top = at(y_lo, x_lo) * (S::one() - tx) + at(y_lo, x_hi) * tx;
                let bot = at(y_hi, x_lo) * (S::one() - tx) + at(y_hi, x_hi) * tx;
                out[ci * side * side + oy * side + ox] = top * (S::one() - ty) + bot * ty;
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, side, side], out))
}

/// Box blur with an odd kernel size; `size <= 1` is the identity.
/// Borders clamp to the image edge.
pub fn box_blur<S: Scalar>(src: &Tensor<S>, size: usize) -> Result<Tensor<S>> {
    if size <= 1 {
        return Ok(src.clone());
    }
    if size % 2 == 0 {
        return Err(Error::Parameter(format!(
            "box blur kernel size must be odd, got {size}"
        )));
    }
    let (c, h, w) = match *src.shape() {
        [c, h, w] => (c, h, w),
        ref other => {
            return Err(Error::Dimension(format!(
                "blur source must be [C,H,W], got {other:?}"
            )))
        }
    };
    let r = (size / 2) as isize;
    let norm = S::of(1.0 / (size * size) as f64);
    let data = src.data();
    let mut tmp = vec![S::zero(); c * h * w];
    // horizontal pass
    for ci in 0..c {
        let plane = ci * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = S::zero();
                for dx in -r..=r {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc = acc + data[plane + y * w + xx];
                }
                tmp[plane + y * w + x] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![S::zero(); c * h * w];
    for ci in 0..c {
        let plane = ci * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = S::zero();
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    acc = acc + tmp[plane + yy * w + x];
                }
                out[plane + y * w + x] = acc * norm;
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, h, w], out))
}
