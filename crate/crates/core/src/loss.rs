//! Class-frequency weighting and the class-balanced cross-entropy.
//!
//! The loss averages `-log p` within each class first and then combines the
//! class means with normalized weights:
//!
//! `L = -sum_c w_c / N_c * sum_{i in c} log p_c(i)`
//!
//! which differs from per-pixel weighted cross-entropy whenever classes are
//! unbalanced. Classes with no pixels in the batch contribute nothing.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    /// `N_total / (C * N_c)`
    pub raw: Vec<f64>,
    /// `raw / sum(raw)`
    pub normalized: Vec<f64>,
}

pub fn compute_class_weights(pixel_counts: &[u64]) -> Result<ClassWeights> {
    if pixel_counts.len() < 2 {
        return Err(Error::config("class weights need at least two classes"));
    }
    if let Some(c) = pixel_counts.iter().position(|&n| n == 0) {
        return Err(Error::config(format!("class {c} has no pixels; its weight is undefined")));
    }
    let total: u64 = pixel_counts.iter().sum();
    let classes = pixel_counts.len() as f64;
    let raw: Vec<f64> = pixel_counts
        .iter()
        .map(|&n| total as f64 / (classes * n as f64))
        .collect();
    let sum: f64 = raw.iter().sum();
    let normalized = raw.iter().map(|w| w / sum).collect();
    Ok(ClassWeights { raw, normalized })
}

/// Pixels per class over a label slice.
pub fn class_pixel_counts(labels: &[u8], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for &l in labels {
        if let Some(c) = counts.get_mut(l as usize) {
            *c += 1;
        }
    }
    counts
}

struct Prepared<T> {
    /// log-probabilities, same layout as the logits
    log_probs: Tensor<T>,
    counts: Vec<u64>,
}

fn prepare<T: Element>(logits: &Tensor<T>, target: &[u8], weights: &[f64]) -> Result<Prepared<T>> {
    let s = logits.shape();
    if s.c < 2 {
        return Err(Error::shape("cross-entropy needs at least two class channels"));
    }
    if target.len() != s.n * s.plane() {
        return Err(Error::shape(format!(
            "{} target labels for {} logit pixels",
            target.len(),
            s.n * s.plane()
        )));
    }
    if weights.len() != s.c {
        return Err(Error::shape(format!("{} class weights for {} classes", weights.len(), s.c)));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= s.c) {
        return Err(Error::format(format!("target class {bad} out of range for {} classes", s.c)));
    }
    logits.ensure_finite("logits")?;

    let hw = s.plane();
    let mut log_probs = logits.clone();
    let lp = log_probs.data_mut();
    for n in 0..s.n {
        let base = n * s.c * hw;
        for p in 0..hw {
            let at = |c: usize| base + c * hw + p;
            let mut max = T::neg_infinity();
            for c in 0..s.c {
                max = max.max(lp[at(c)]);
            }
            let mut sum = T::zero();
            for c in 0..s.c {
                sum += (lp[at(c)] - max).exp();
            }
            let lse = max + sum.ln();
            for c in 0..s.c {
                lp[at(c)] = lp[at(c)] - lse;
            }
        }
    }
    Ok(Prepared {
        log_probs,
        counts: class_pixel_counts(target, s.c),
    })
}

/// Per-pixel coefficient `w_c / N_c` of each present class.
fn coefficients(counts: &[u64], weights: &[f64]) -> Vec<f64> {
    counts
        .iter()
        .zip(weights)
        .map(|(&n, &w)| if n == 0 { 0.0 } else { w / n as f64 })
        .collect()
}

/// Class-balanced cross-entropy of `logits` (n, C, h, w) against per-pixel labels.
pub fn weighted_ce<T: Element>(logits: &Tensor<T>, target: &[u8], weights: &[f64]) -> Result<T> {
    let prep = prepare(logits, target, weights)?;
    let s = logits.shape();
    let hw = s.plane();
    let coef = coefficients(&prep.counts, weights);
    // per-class sums first so that each class mean is formed separately
    let mut class_sum = vec![T::zero(); s.c];
    for (i, &t) in target.iter().enumerate() {
        let (n, p) = (i / hw, i % hw);
        class_sum[t as usize] += prep.log_probs.data()[(n * s.c + t as usize) * hw + p];
    }
    let loss = class_sum
        .iter()
        .zip(&coef)
        .fold(T::zero(), |acc, (&sum, &k)| acc - T::from_f64_lossy(k) * sum);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {loss}")));
    }
    Ok(loss)
}

/// Analytic gradient of [`weighted_ce`] with respect to the logits.
pub fn weighted_ce_grad<T: Element>(logits: &Tensor<T>, target: &[u8], weights: &[f64]) -> Result<Tensor<T>> {
    let prep = prepare(logits, target, weights)?;
    let s = logits.shape();
    let hw = s.plane();
    let coef: Vec<T> = coefficients(&prep.counts, weights)
        .into_iter()
        .map(T::from_f64_lossy)
        .collect();
    let mut grad = prep.log_probs;
    let g = grad.data_mut();
    for (i, &t) in target.iter().enumerate() {
        let (n, p) = (i / hw, i % hw);
        let k = coef[t as usize];
        for c in 0..s.c {
            let at = (n * s.c + c) * hw + p;
            let prob = g[at].exp();
            let onehot = if c == t as usize { T::one() } else { T::zero() };
            g[at] = k * (prob - onehot);
        }
    }
    Ok(grad)
}
