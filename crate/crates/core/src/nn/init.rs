use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;

/// Kaiming-normal initialization: N(0, 2 / fan_in).
pub fn he_normal<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(dist.sample(rng)))
}
