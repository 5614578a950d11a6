//! Named, flat views over every scalar a model owns.
//!
//! Visiting order is structural and stable, so two models built from the same
//! configuration produce aligned lists. The optimizer relies on this to pair
//! parameters with their gradients, and the weight container uses the names.

use crate::tensor::{BatchNormParams, ConvParams, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; serialized but not trained.
    Buffer,
}

#[derive(Debug)]
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct ParamViewMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: &'a mut [T],
}

pub trait Parameterized<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>);

    fn params(&self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_, T>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    /// Number of trainable scalars.
    fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.data.len())
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Element> Parameterized<T> for ConvParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        out.push(ParamView {
            name: join(prefix, "weight"),
            shape: self.weight.shape().dims().to_vec(),
            kind: ParamKind::Trainable,
            data: self.weight.data(),
        });
        if let Some(b) = &self.bias {
            out.push(ParamView {
                name: join(prefix, "bias"),
                shape: vec![b.len()],
                kind: ParamKind::Trainable,
                data: b,
            });
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        let shape = self.weight.shape().dims().to_vec();
        out.push(ParamViewMut {
            name: join(prefix, "weight"),
            shape,
            kind: ParamKind::Trainable,
            data: self.weight.data_mut(),
        });
        if let Some(b) = &mut self.bias {
            out.push(ParamViewMut {
                name: join(prefix, "bias"),
                shape: vec![b.len()],
                kind: ParamKind::Trainable,
                data: b,
            });
        }
    }
}

impl<T: Element> Parameterized<T> for BatchNormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        let c = self.channels();
        for (name, kind, data) in [
            ("gamma", ParamKind::Trainable, &self.gamma),
            ("beta", ParamKind::Trainable, &self.beta),
            ("running_mean", ParamKind::Buffer, &self.running_mean),
            ("running_var", ParamKind::Buffer, &self.running_var),
        ] {
            out.push(ParamView {
                name: join(prefix, name),
                shape: vec![c],
                kind,
                data,
            });
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        let c = self.channels();
        let BatchNormParams {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } = self;
        for (name, kind, data) in [
            ("gamma", ParamKind::Trainable, gamma),
            ("beta", ParamKind::Trainable, beta),
            ("running_mean", ParamKind::Buffer, running_mean),
            ("running_var", ParamKind::Buffer, running_var),
        ] {
            out.push(ParamViewMut {
                name: join(prefix, name),
                shape: vec![c],
                kind,
                data,
            });
        }
    }
}
