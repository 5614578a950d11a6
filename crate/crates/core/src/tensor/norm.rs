use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

/// Per-channel statistics of one training batch, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, as used for normalization.
    pub var: Vec<T>,
    /// Normalized input `(x - mean) / sqrt(var + eps)`.
    pub normalized: Tensor<T>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Element> BatchNormParams<T> {
    /// gamma 1, beta 0, mean 0, var 1.
    pub fn neutral(channels: usize, eps: T) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("batch-norm parameter vectors differ in length"));
        }
        if !(self.eps > T::zero()) {
            return Err(Error::config("batch-norm epsilon must be positive"));
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::config("batch-norm running variance must be non-negative"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that inference is `x * scale + shift`.
    pub fn affine(&self) -> Vec<(T, T)> {
        (0..self.channels())
            .map(|c| {
                let s = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
                (s, self.beta[c] - self.running_mean[c] * s)
            })
            .collect()
    }

    /// Exponential moving update of the running statistics.
    ///
    /// The running variance tracks the biased batch variance, the same value
    /// training-mode normalization divides by, so running statistics equal to
    /// one batch's statistics reproduce that batch's training-mode output.
    pub fn update_running(&mut self, stats: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + momentum * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + momentum * stats.var[c];
        }
    }

    pub(crate) fn check_channels(&self, c: usize) -> Result<()> {
        if self.channels() != c {
            return Err(Error::shape(format!(
                "batch norm has {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Inference-mode normalization with running statistics.
pub fn batchnorm_infer<T: Element>(x: &Tensor<T>, bn: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    bn.check_channels(s.c)?;
    let affine = bn.affine();
    let mut y = x.clone();
    y.data_mut()
        .par_chunks_mut(s.plane().max(1))
        .enumerate()
        .for_each(|(nc, plane)| {
            let (a, b) = affine[nc % s.c];
            for v in plane {
                *v = *v * a + b;
            }
        });
    Ok(y)
}

pub fn batchnorm_infer_vjp<T: Element>(
    x: &Tensor<T>,
    bn: &BatchNormParams<T>,
    upstream: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let s = x.shape();
    bn.check_channels(s.c)?;
    upstream.expect_shape(s, "batchnorm_infer_vjp upstream")?;
    let c = s.c;
    let mut input = upstream.clone();
    let mut gamma = vec![T::zero(); c];
    let mut beta = vec![T::zero(); c];
    for ch in 0..c {
        let inv = T::one() / (bn.running_var[ch] + bn.eps).sqrt();
        for n in 0..s.n {
            for (&g, &xv) in upstream.plane(n, ch).iter().zip(x.plane(n, ch)) {
                gamma[ch] += g * (xv - bn.running_mean[ch]) * inv;
                beta[ch] += g;
            }
        }
    }
    let affine = bn.affine();
    input
        .data_mut()
        .chunks_mut(s.plane().max(1))
        .enumerate()
        .for_each(|(nc, plane)| {
            let a = affine[nc % c].0;
            for v in plane {
                *v = *v * a;
            }
        });
    Ok(BatchNormGrads { input, gamma, beta })
}

/// Training-mode normalization with the batch's own statistics.
///
/// Running statistics are not touched; apply them with
/// [`BatchNormParams::update_running`].
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    bn: &BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let s = x.shape();
    bn.check_channels(s.c)?;
    let count = s.n * s.plane();
    if count == 0 {
        return Err(Error::shape("batch norm over an empty batch"));
    }
    let cnt = T::from_usize(count).unwrap();
    let per_channel: Vec<(T, T)> = (0..s.c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = T::zero();
            for n in 0..s.n {
                sum += x.plane(n, ch).iter().copied().sum::<T>();
            }
            let mean = sum / cnt;
            let mut sq = T::zero();
            for n in 0..s.n {
                sq += x.plane(n, ch).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            (mean, sq / cnt)
        })
        .collect();
    let mean: Vec<T> = per_channel.iter().map(|p| p.0).collect();
    let var: Vec<T> = per_channel.iter().map(|p| p.1).collect();

    let mut normalized = x.clone();
    let mut y = x.clone();
    for (nc, (zp, yp)) in normalized
        .data_mut()
        .chunks_mut(s.plane())
        .zip(y.data_mut().chunks_mut(s.plane()))
        .enumerate()
    {
        let ch = nc % s.c;
        let inv = T::one() / (var[ch] + bn.eps).sqrt();
        for (z, yv) in zp.iter_mut().zip(yp.iter_mut()) {
            *z = (*z - mean[ch]) * inv;
            *yv = *z * bn.gamma[ch] + bn.beta[ch];
        }
    }
    Ok((
        y,
        BatchStats {
            mean,
            var,
            normalized,
            count,
        },
    ))
}

pub fn batchnorm_train_vjp<T: Element>(
    bn: &BatchNormParams<T>,
    stats: &BatchStats<T>,
    upstream: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let s = stats.normalized.shape();
    upstream.expect_shape(s, "batchnorm_train_vjp upstream")?;
    bn.check_channels(s.c)?;
    let cnt = T::from_usize(stats.count).unwrap();
    let mut gamma = vec![T::zero(); s.c];
    let mut beta = vec![T::zero(); s.c];
    for ch in 0..s.c {
        for n in 0..s.n {
            for (&g, &z) in upstream.plane(n, ch).iter().zip(stats.normalized.plane(n, ch)) {
                gamma[ch] += g * z;
                beta[ch] += g;
            }
        }
    }
    let mut input = upstream.clone();
    for (nc, plane) in input.data_mut().chunks_mut(s.plane()).enumerate() {
        let ch = nc % s.c;
        let n = nc / s.c;
        let inv = T::one() / (stats.var[ch] + bn.eps).sqrt();
        let k = bn.gamma[ch] * inv / cnt;
        for (v, &z) in plane.iter_mut().zip(stats.normalized.plane(n, ch)) {
            *v = k * (cnt * *v - beta[ch] - z * gamma[ch]);
        }
    }
    Ok(BatchNormGrads { input, gamma, beta })
}
