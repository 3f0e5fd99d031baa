//! Seeded weight initialization helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

/// Uniform `U(-b, b)` with the Kaiming bound `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid init shape")
}
