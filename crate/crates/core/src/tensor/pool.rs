use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Half-open input range `[floor(i*len/out), ceil((i+1)*len/out))` feeding output cell `i`.
pub fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling to `out_h x out_w`.
///
/// Output sizes larger than the input are accepted: windows then overlap and
/// each still holds at least one input cell.
pub fn adaptive_avg_pool<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::shape("adaptive pooling to or from an empty map"));
    }
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut y = Tensor::zeros(os);
    let yd = y.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for i in 0..out_h {
                let (y0, y1) = pool_window(i, s.h, out_h);
                for j in 0..out_w {
                    let (x0, x1) = pool_window(j, s.w, out_w);
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[yy * s.w + xx];
                        }
                    }
                    let cnt = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    yd[((n * s.c + c) * out_h + i) * out_w + j] = acc / cnt;
                }
            }
        }
    }
    Ok(y)
}

pub fn adaptive_avg_pool_vjp<T: Element>(input: Shape, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let os = upstream.shape();
    if (os.n, os.c) != (input.n, input.c) {
        return Err(Error::shape(format!(
            "pool vjp: upstream {os} does not belong to input {input}"
        )));
    }
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for n in 0..os.n {
        for c in 0..os.c {
            let g = upstream.plane(n, c);
            let base = (n * input.c + c) * input.plane();
            for i in 0..os.h {
                let (y0, y1) = pool_window(i, input.h, os.h);
                for j in 0..os.w {
                    let (x0, x1) = pool_window(j, input.w, os.w);
                    let cnt = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    let share = g[i * os.w + j] / cnt;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            d[base + yy * input.w + xx] += share;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}
