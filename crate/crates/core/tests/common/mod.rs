//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod checks;
pub mod container;
pub mod fusion;
pub mod grad;
pub mod oracles;

use rand::Rng;
use tearflow::tensor::{Shape, Tensor};

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

pub fn random_tensor_f32<R: Rng>(rng: &mut R, shape: Shape, lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Print one acceptance line and return whether it passed.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!("CRITERION {id} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
