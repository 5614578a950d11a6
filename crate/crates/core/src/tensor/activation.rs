use super::{Element, Tensor};
use crate::error::Result;

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gates `upstream` by `x > 0`; `x` may be either the input or the output of
/// [`relu`], since both are positive at the same positions.
pub fn relu_vjp<T: Element>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(upstream, |v, g| if v > T::zero() { g } else { T::zero() })
}
