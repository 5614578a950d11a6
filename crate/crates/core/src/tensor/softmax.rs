use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-pixel softmax over the channel axis, max-subtracted.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c < 2 {
        return Err(Error::shape("softmax needs at least two channels"));
    }
    let hw = s.plane();
    let mut y = x.clone();
    let yd = y.data_mut();
    for n in 0..s.n {
        let base = n * s.c * hw;
        for p in 0..hw {
            let at = |c: usize| base + c * hw + p;
            let mut max = T::neg_infinity();
            for c in 0..s.c {
                max = max.max(yd[at(c)]);
            }
            let mut sum = T::zero();
            for c in 0..s.c {
                let e = (yd[at(c)] - max).exp();
                yd[at(c)] = e;
                sum += e;
            }
            for c in 0..s.c {
                yd[at(c)] = yd[at(c)] / sum;
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn equal_logits_split_evenly() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
        assert_eq!(softmax_channels(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1000.0f32, 0.0]).unwrap();
        let p = softmax_channels(&x).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn single_channel_is_rejected() {
        assert!(softmax_channels(&Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }
}
