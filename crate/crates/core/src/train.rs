//! Small-scale training loop (batch size 1, no augmentation) and a synthetic
//! blob dataset used to check that the whole backward pass learns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{class_pixel_counts, compute_class_weights, weighted_ce, weighted_ce_grad, ClassWeights};
use crate::metrics::SegMask;
use crate::model::TfNet;
use crate::optim::{sgd_step, OptimState};
use crate::tensor::{Element, Shape, Tensor};

/// Default momentum of the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Sample<T = f32> {
    /// `(1, 3, h, w)`
    pub image: Tensor<T>,
    pub mask: SegMask,
}

impl<T: Element> Sample<T> {
    pub fn new(image: Tensor<T>, mask: SegMask) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || s.h != mask.height() || s.w != mask.width() {
            return Err(Error::shape(format!(
                "sample image {:?} does not match a {}x{} mask",
                s.dims(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Sample { image, mask })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss before each optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub epoch_lrs: Vec<f64>,
}

/// Class weights from the pixel counts of a sample set.
pub fn sample_class_weights<T>(samples: &[Sample<T>], num_classes: usize) -> Result<ClassWeights> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for (c, n) in class_pixel_counts(s.mask.labels(), num_classes).into_iter().enumerate() {
            counts[c] += n;
        }
    }
    compute_class_weights(&counts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Passes over the sample set per scheduler epoch. With very few samples a
    /// single pass is one noisy step, which would trip the plateau rule.
    pub passes_per_epoch: usize,
    /// Momentum of the running-statistics update applied after every step.
    pub bn_momentum: f64,
}

impl TrainOptions {
    pub fn epochs(epochs: usize) -> Self {
        TrainOptions {
            epochs,
            passes_per_epoch: 1,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

/// Train `model` in place for `epochs` passes over `samples`, one SGD step per
/// sample. The plateau schedule is updated with each epoch's mean loss, and
/// the running norm statistics are re-estimated on the samples at the end.
pub fn train_toy<T: Element>(
    model: &mut TfNet<T>,
    samples: &[Sample<T>],
    epochs: usize,
    state: &mut OptimState<T>,
) -> Result<TrainReport> {
    train_with(model, samples, &TrainOptions::epochs(epochs), state)
}

pub fn train_with<T: Element>(
    model: &mut TfNet<T>,
    samples: &[Sample<T>],
    options: &TrainOptions,
    state: &mut OptimState<T>,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::config("training needs at least one sample"));
    }
    if options.passes_per_epoch == 0 {
        return Err(Error::config("passes_per_epoch must be positive"));
    }
    if model.is_fused() {
        return Err(Error::config("cannot train a fused network"));
    }
    let weights = sample_class_weights(samples, model.config().num_classes)?;
    let bn_momentum = T::from_f64_lossy(options.bn_momentum);
    let mut report = TrainReport::default();
    for epoch in 0..options.epochs {
        report.epoch_lrs.push(state.lr);
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..options.passes_per_epoch {
            for (i, sample) in samples.iter().enumerate() {
                let (logits, cache) = model.forward_train(&sample.image)?;
                let labels = sample.mask.labels();
                let loss = weighted_ce(&logits, labels, &weights.normalized)
                    .map_err(|e| with_step(e, epoch, i))?
                    .to_f64_lossy();
                let dlogits = weighted_ce_grad(&logits, labels, &weights.normalized)?;
                let mut grads = model.zeros_like();
                model.backward(&cache, &dlogits, &mut grads)?;
                model.update_running_stats(&cache, bn_momentum);
                sgd_step(model, &grads, state).map_err(|e| with_step(e, epoch, i))?;
                report.step_losses.push(loss);
                total += loss;
                steps += 1;
            }
        }
        let mean = total / steps as f64;
        report.epoch_losses.push(mean);
        state.plateau_update(mean);
    }
    if options.epochs > 0 {
        // the moving averages trail the weights; re-estimate them at the end
        let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.clone()).collect();
        model.recalibrate_running_stats(&images)?;
    }
    Ok(report)
}

fn with_step(e: Error, epoch: usize, sample: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, sample {sample}: {msg}")),
        other => other,
    }
}

/// A 3-channel textured image containing one elliptical blob that covers
/// roughly `fraction` of the pixels, and the blob's mask.
pub fn synthetic_blob_sample<T: Element>(size: usize, fraction: f64, seed: u64) -> Result<Sample<T>> {
    if size == 0 || !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("invalid synthetic sample: size {size}, fraction {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let aspect: f64 = rng.gen_range(0.7..1.4);
    // area of the ellipse = pi * a * b = fraction * s^2
    let b = (fraction * s * s / (std::f64::consts::PI * aspect)).sqrt();
    let a = b * aspect;
    let cy = rng.gen_range(b + 1.0..s - b - 1.0);
    let cx = rng.gen_range(a + 1.0..s - a - 1.0);
    let mask = SegMask::from_fn(size, size, |y, x| {
        let dy = (y as f64 + 0.5 - cy) / b;
        let dx = (x as f64 + 0.5 - cx) / a;
        dy * dy + dx * dx <= 1.0
    });
    let noise: Vec<f64> = (0..3 * size * size).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let image = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let inside = mask.get(y, x);
        let ring = 0.5 + 0.2 * ((x as f64 + y as f64) * 0.4).sin();
        let v = match (c, inside) {
            (0, true) => 0.85,
            (0, false) => 0.25,
            (1, true) => 0.3,
            (1, false) => ring,
            _ => 0.5 + 0.1 * (y as f64 * 0.3).cos(),
        };
        T::from_f64_lossy(v + noise[(c * size + y) * size + x])
    });
    Sample::new(image, mask)
}
