use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Stack tensors along the channel axis, in argument order.
pub fn concat_channels<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    let mut channels = 0;
    for x in xs {
        let s = x.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!("concat: {s} does not match {first}")));
        }
        channels += s.c;
    }
    let out = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(out.len());
    for n in 0..first.n {
        for x in xs {
            let s = x.shape();
            let per = s.c * s.plane();
            data.extend_from_slice(&x.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(out, data)
}

/// Split `upstream` back into pieces with the given channel counts.
pub fn concat_channels_vjp<T: Element>(
    channels: &[usize],
    upstream: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let s = upstream.shape();
    if channels.iter().sum::<usize>() != s.c {
        return Err(Error::shape(format!(
            "concat_vjp: channel split {channels:?} does not sum to {}",
            s.c
        )));
    }
    let mut parts: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(s.n * c * s.plane()))
        .collect();
    for n in 0..s.n {
        let mut offset = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            let start = (n * s.c + offset) * s.plane();
            part.extend_from_slice(&upstream.data()[start..start + c * s.plane()]);
            offset += c;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), d))
        .collect()
}
