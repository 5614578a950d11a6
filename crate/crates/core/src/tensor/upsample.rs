//! Bilinear resampling, half-pixel (align-corners = false) convention:
//! destination pixel `d` samples source coordinate `(d + 0.5) * in / out - 0.5`,
//! clamped to `[0, in - 1]`.

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Source taps `(i0, i1, frac)` for each destination index along one axis.
fn taps(out: usize, len: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resize every channel map to `out_h x out_w` (upsampling or downsampling).
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::shape("bilinear resize to or from an empty map"));
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let ty = taps(out_h, s.h);
    let tx = taps(out_w, s.w);
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut y = Tensor::zeros(os);
    let yd = y.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            let base = (n * s.c + c) * out_h * out_w;
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let top = p[y0 * s.w + x0] * (T::one() - fx) + p[y0 * s.w + x1] * fx;
                    let bot = p[y1 * s.w + x0] * (T::one() - fx) + p[y1 * s.w + x1] * fx;
                    yd[base + i * out_w + j] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    Ok(y)
}

pub fn bilinear_resize_vjp<T: Element>(input: Shape, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let os = upstream.shape();
    if (os.n, os.c) != (input.n, input.c) {
        return Err(Error::shape(format!(
            "resize vjp: upstream {os} does not belong to input {input}"
        )));
    }
    if (os.h, os.w) == (input.h, input.w) {
        return Ok(upstream.clone());
    }
    let ty = taps(os.h, input.h);
    let tx = taps(os.w, input.w);
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for n in 0..os.n {
        for c in 0..os.c {
            let g = upstream.plane(n, c);
            let base = (n * input.c + c) * input.plane();
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let v = g[i * os.w + j];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    d[base + y0 * input.w + x0] += top * (T::one() - fx);
                    d[base + y0 * input.w + x1] += top * fx;
                    d[base + y1 * input.w + x0] += bot * (T::one() - fx);
                    d[base + y1 * input.w + x1] += bot * fx;
                }
            }
        }
    }
    Ok(dx)
}
