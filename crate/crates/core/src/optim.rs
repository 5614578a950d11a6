//! SGD with momentum and weight decay, plus the
//! reduce-on-plateau learning-rate schedule.
//!
//! Update convention (weight decay folded into the gradient before momentum):
//!
//! `v <- m * v + g + wd * p`, `p <- p - lr * v`

use crate::error::{Error, Result};
use crate::params::{ParamKind, Parameterized};
use crate::tensor::Element;

/// Halve the learning rate after `patience` epochs without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub stale: usize,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        PlateauScheduler {
            factor: 0.5,
            patience: 3,
            best: f64::INFINITY,
            stale: 0,
        }
    }
}

impl PlateauScheduler {
    /// Record one epoch's loss; returns the learning rate to use next.
    pub fn update(&mut self, lr: f64, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau: PlateauScheduler,
    /// One buffer per trainable parameter tensor, in visit order.
    velocity: Vec<Vec<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(OptimState {
            lr,
            momentum,
            weight_decay,
            plateau: PlateauScheduler::default(),
            velocity: Vec::new(),
        })
    }

    /// lr 1e-2, momentum 0.937, weight decay 5e-4.
    pub fn standard() -> Self {
        Self::new(1e-2, 0.937, 5e-4).expect("constants are valid")
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Apply one SGD step to flat parameter slices with matching gradients.
    pub fn step_slices(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} parameter tensors but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape("parameter set changed between optimizer steps"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.velocity[i].len() != p.len() {
                return Err(Error::shape(format!(
                    "parameter tensor {i}: {} values, gradient {}, momentum buffer {}",
                    p.len(),
                    g.len(),
                    self.velocity[i].len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
            }
        }
        let m = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(self.lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pj, &gj), vj) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vj = m * *vj + gj + wd * *pj;
                *pj = *pj - lr * *vj;
            }
        }
        Ok(())
    }

    /// Epoch-level schedule update; returns the new learning rate.
    pub fn plateau_update(&mut self, loss: f64) -> f64 {
        self.lr = self.plateau.update(self.lr, loss);
        self.lr
    }
}

/// One SGD step over every trainable tensor of `model`, pairing it with the
/// same-named tensor of `grads` (a structurally identical model).
pub fn sgd_step<T: Element, M: Parameterized<T>>(model: &mut M, grads: &M, state: &mut OptimState<T>) -> Result<()> {
    let grad_views: Vec<_> = grads
        .params()
        .into_iter()
        .filter(|p| p.kind == ParamKind::Trainable)
        .collect();
    let mut param_views: Vec<_> = model
        .params_mut()
        .into_iter()
        .filter(|p| p.kind == ParamKind::Trainable)
        .collect();
    if param_views.len() != grad_views.len()
        || param_views.iter().zip(&grad_views).any(|(p, g)| p.name != g.name)
    {
        return Err(Error::shape("gradient model does not mirror the parameter model"));
    }
    let mut slices: Vec<&mut [T]> = param_views.iter_mut().map(|p| &mut *p.data).collect();
    let grad_slices: Vec<&[T]> = grad_views.iter().map(|g| g.data).collect();
    state.step_slices(&mut slices, &grad_slices)
}
