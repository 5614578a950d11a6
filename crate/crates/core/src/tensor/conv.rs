//! 2-D cross-correlation with zero padding, stride and channel groups.
//!
//! General shapes go through im2col + GEMM on fixed-width column tiles; a
//! direct loop handles depthwise kernels where the GEMM would be a single row.
//! The tile width is a constant, so the partition (and therefore every
//! floating-point summation order) does not depend on the thread count.

use rayon::prelude::*;

use super::gemm::gemm;
use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Output pixels per im2col tile.
const TILE: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(out_ch, in_ch / groups, k, k)`
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Element> ConvParams<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero kernel with optional zero bias.
    pub fn zeros(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 {
            return Err(Error::shape(format!(
                "{in_ch} input channels do not split into {groups} groups"
            )));
        }
        Self::new(
            Tensor::zeros(Shape::new(out_ch, in_ch / groups, kernel, kernel)),
            with_bias.then(|| vec![T::zero(); out_ch]),
            stride,
            kernel / 2,
            groups,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.h != s.w || s.h % 2 == 0 {
            return Err(Error::shape(format!("kernel must be square and odd, got {s}")));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::shape("stride and groups must be positive"));
        }
        if s.n % self.groups != 0 {
            return Err(Error::shape(format!(
                "{} output channels do not split into {} groups",
                s.n, self.groups
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != s.n {
                return Err(Error::shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    s.n
                )));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn param_count(&self) -> usize {
        self.weight.shape().len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Output shape for an input of shape `x`, or an error if incompatible.
    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        self.validate()?;
        if x.c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.c
            )));
        }
        let k = self.kernel();
        let span_h = x.h + 2 * self.padding;
        let span_w = x.w + 2 * self.padding;
        if span_h < k || span_w < k {
            return Err(Error::shape(format!(
                "{k}x{k} kernel does not fit a padded {span_h}x{span_w} input"
            )));
        }
        Ok(Shape::new(
            x.n,
            self.out_channels(),
            (span_h - k) / self.stride + 1,
            (span_w - k) / self.stride + 1,
        ))
    }
}

struct Geometry {
    in_shape: Shape,
    out_shape: Shape,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    cin_pg: usize,
    cout_pg: usize,
}

impl Geometry {
    fn new<T: Element>(x: Shape, p: &ConvParams<T>) -> Result<Self> {
        let out_shape = p.output_shape(x)?;
        Ok(Geometry {
            in_shape: x,
            out_shape,
            k: p.kernel(),
            stride: p.stride,
            pad: p.padding,
            groups: p.groups,
            cin_pg: x.c / p.groups,
            cout_pg: out_shape.c / p.groups,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin_pg * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output coordinate `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let v = (o * self.stride + t) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < len).then_some(v as usize)
    }

    fn tiles(&self) -> Vec<(usize, usize, usize, usize)> {
        let hw = self.out_shape.plane();
        let mut tiles = Vec::new();
        for n in 0..self.in_shape.n {
            for g in 0..self.groups {
                let mut start = 0;
                while start < hw {
                    let len = TILE.min(hw - start);
                    tiles.push((n, g, start, len));
                    start += len;
                }
            }
        }
        tiles
    }

    /// Fill `col` (`col_rows x len`) with input patches for output pixels
    /// `start .. start + len` of batch `n`, group `g`.
    fn im2col<T: Element>(&self, x: &[T], n: usize, g: usize, start: usize, len: usize, col: &mut [T]) {
        let (h, w) = (self.in_shape.h, self.in_shape.w);
        let ow = self.out_shape.w;
        let k = self.k;
        for ci in 0..self.cin_pg {
            let plane = &x[((n * self.in_shape.c) + g * self.cin_pg + ci) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * len..(row + 1) * len];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let o = start + j;
                        let (oy, ox) = (o / ow, o % ow);
                        *d = match (self.src(oy, ky, h), self.src(ox, kx, w)) {
                            (Some(iy), Some(ix)) => plane[iy * w + ix],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }

    /// Scatter-add a column tile back into the input-gradient plane set.
    fn col2im<T: Element>(&self, col: &[T], n: usize, g: usize, start: usize, len: usize, dx: &mut [T]) {
        let (h, w) = (self.in_shape.h, self.in_shape.w);
        let ow = self.out_shape.w;
        let k = self.k;
        for ci in 0..self.cin_pg {
            let base = ((n * self.in_shape.c) + g * self.cin_pg + ci) * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * len..(row + 1) * len];
                    for (j, &v) in src.iter().enumerate() {
                        let o = start + j;
                        let (oy, ox) = (o / ow, o % ow);
                        if let (Some(iy), Some(ix)) = (self.src(oy, ky, h), self.src(ox, kx, w)) {
                            dx[base + iy * w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlate `x` with `p`.
pub fn conv2d<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let geo = Geometry::new(x.shape(), p)?;
    if geo.cin_pg == 1 {
        return conv2d_direct(x, p);
    }
    let os = geo.out_shape;
    let hw = os.plane();
    let kk = geo.col_rows();
    let xd = x.data();
    let wd = p.weight.data();

    let tiles = geo.tiles();
    let blocks: Vec<Vec<T>> = tiles
        .par_iter()
        .map(|&(n, g, start, len)| {
            let mut out = vec![T::zero(); geo.cout_pg * len];
            let w_g = &wd[g * geo.cout_pg * kk..(g + 1) * geo.cout_pg * kk];
            if geo.is_pointwise() {
                // the input planes already form the column matrix; gather the tile
                let mut col = vec![T::zero(); kk * len];
                for ci in 0..kk {
                    let src = &xd[((n * geo.in_shape.c) + g * geo.cin_pg + ci) * hw + start..][..len];
                    col[ci * len..(ci + 1) * len].copy_from_slice(src);
                }
                gemm(false, false, geo.cout_pg, kk, len, w_g, &col, T::zero(), &mut out, len);
            } else {
                let mut col = vec![T::zero(); kk * len];
                geo.im2col(xd, n, g, start, len, &mut col);
                gemm(false, false, geo.cout_pg, kk, len, w_g, &col, T::zero(), &mut out, len);
            }
            out
        })
        .collect();

    let mut y = Tensor::zeros(os);
    let yd = y.data_mut();
    for (&(n, g, start, len), block) in tiles.iter().zip(&blocks) {
        for co in 0..geo.cout_pg {
            let c = g * geo.cout_pg + co;
            let b = p.bias.as_ref().map_or(T::zero(), |b| b[c]);
            let dst = &mut yd[(n * os.c + c) * hw + start..][..len];
            for (d, &v) in dst.iter_mut().zip(&block[co * len..(co + 1) * len]) {
                *d = v + b;
            }
        }
    }
    Ok(y)
}

/// Direct-loop convolution, used for depthwise kernels and tiny shapes.
pub fn conv2d_direct<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let geo = Geometry::new(x.shape(), p)?;
    let (is, os) = (geo.in_shape, geo.out_shape);
    let k = geo.k;
    let xd = x.data();
    let wd = p.weight.data();
    let mut y = Tensor::zeros(os);
    y.data_mut()
        .par_chunks_mut(os.plane().max(1))
        .enumerate()
        .for_each(|(nc, out)| {
            let (n, co) = (nc / os.c, nc % os.c);
            let g = co / geo.cout_pg;
            let b = p.bias.as_ref().map_or(T::zero(), |b| b[co]);
            for (oy, row) in out.chunks_mut(os.w).enumerate() {
                for (ox, o) in row.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for ci in 0..geo.cin_pg {
                        let plane = &xd[(n * is.c + g * geo.cin_pg + ci) * is.plane()..][..is.plane()];
                        let wk = &wd[(co * geo.cin_pg + ci) * k * k..][..k * k];
                        for ky in 0..k {
                            let Some(iy) = geo.src(oy, ky, is.h) else { continue };
                            for kx in 0..k {
                                if let Some(ix) = geo.src(ox, kx, is.w) {
                                    acc += wk[ky * k + kx] * plane[iy * is.w + ix];
                                }
                            }
                        }
                    }
                    *o = acc + b;
                }
            }
        });
    Ok(y)
}

/// Vector-Jacobian product of [`conv2d`] with respect to input, weights and bias.
///
/// The bias gradient is returned even for bias-free convolutions.
pub fn conv2d_vjp<T: Element>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let geo = Geometry::new(x.shape(), p)?;
    upstream.expect_shape(geo.out_shape, "conv2d_vjp upstream")?;
    let os = geo.out_shape;
    let hw = os.plane();

    let mut bias = vec![T::zero(); os.c];
    for n in 0..os.n {
        for (c, b) in bias.iter_mut().enumerate() {
            *b += upstream.plane(n, c).iter().copied().sum::<T>();
        }
    }

    if geo.cin_pg == 1 {
        let (input, weight) = depthwise_vjp(&geo, x, p, upstream);
        return Ok(ConvGrads { input, weight, bias });
    }

    let kk = geo.col_rows();
    let xd = x.data();
    let wd = p.weight.data();
    let ud = upstream.data();
    let tiles = geo.tiles();

    // per tile: (weight-gradient partial, column-gradient)
    let parts: Vec<(Vec<T>, Vec<T>)> = tiles
        .par_iter()
        .map(|&(n, g, start, len)| {
            let mut col = vec![T::zero(); kk * len];
            geo.im2col(xd, n, g, start, len, &mut col);
            let mut dy = vec![T::zero(); geo.cout_pg * len];
            for co in 0..geo.cout_pg {
                let c = g * geo.cout_pg + co;
                dy[co * len..(co + 1) * len].copy_from_slice(&ud[(n * os.c + c) * hw + start..][..len]);
            }
            let mut dw = vec![T::zero(); geo.cout_pg * kk];
            gemm(false, true, geo.cout_pg, len, kk, &dy, &col, T::zero(), &mut dw, kk);
            let w_g = &wd[g * geo.cout_pg * kk..(g + 1) * geo.cout_pg * kk];
            let mut dcol = vec![T::zero(); kk * len];
            gemm(true, false, kk, geo.cout_pg, len, w_g, &dy, T::zero(), &mut dcol, len);
            (dw, dcol)
        })
        .collect();

    let mut weight = Tensor::zeros(p.weight.shape());
    let mut input = Tensor::zeros(x.shape());
    for (&(n, g, start, len), (dw, dcol)) in tiles.iter().zip(&parts) {
        let dst = &mut weight.data_mut()[g * geo.cout_pg * kk..(g + 1) * geo.cout_pg * kk];
        for (d, &v) in dst.iter_mut().zip(dw) {
            *d += v;
        }
        geo.col2im(dcol, n, g, start, len, input.data_mut());
    }
    Ok(ConvGrads { input, weight, bias })
}

fn depthwise_vjp<T: Element>(
    geo: &Geometry,
    x: &Tensor<T>,
    p: &ConvParams<T>,
    upstream: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (is, os) = (geo.in_shape, geo.out_shape);
    let k = geo.k;
    let wd = p.weight.data();
    let xd = x.data();
    // one task per (batch, output channel); each reads a single input plane
    let parts: Vec<(usize, Vec<T>, Vec<T>)> = (0..os.n * os.c)
        .into_par_iter()
        .map(|nc| {
            let (n, co) = (nc / os.c, nc % os.c);
            let ci = co / geo.cout_pg;
            let plane = &xd[(n * is.c + ci) * is.plane()..][..is.plane()];
            let wk = &wd[co * k * k..][..k * k];
            let dy = upstream.plane(n, co);
            let mut dx = vec![T::zero(); is.plane()];
            let mut dw = vec![T::zero(); k * k];
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = dy[oy * os.w + ox];
                    for ky in 0..k {
                        let Some(iy) = geo.src(oy, ky, is.h) else { continue };
                        for kx in 0..k {
                            if let Some(ix) = geo.src(ox, kx, is.w) {
                                dx[iy * is.w + ix] += wk[ky * k + kx] * g;
                                dw[ky * k + kx] += plane[iy * is.w + ix] * g;
                            }
                        }
                    }
                }
            }
            ((n * is.c + ci), dx, dw)
        })
        .collect();

    let mut input = Tensor::zeros(is);
    let mut weight = Tensor::zeros(p.weight.shape());
    for (nc, (plane_idx, dx, dw)) in parts.into_iter().enumerate() {
        let co = nc % os.c;
        let dst = &mut input.data_mut()[plane_idx * is.plane()..][..is.plane()];
        for (d, v) in dst.iter_mut().zip(dx) {
            *d += v;
        }
        for (d, v) in weight.data_mut()[co * k * k..][..k * k].iter_mut().zip(dw) {
            *d += v;
        }
    }
    (input, weight)
}
