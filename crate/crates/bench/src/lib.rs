//! Shared fixtures for the benchmark targets.

use textsal_core::{Rng, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

pub fn random_param(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::param_uniform(shape, -1.0, 1.0, &mut rng)
}

pub fn random_mask(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| f64::from(rng.next_f64() > 0.6)).collect();
    Tensor::from_vec(shape, data).expect("mask tensor")
}
