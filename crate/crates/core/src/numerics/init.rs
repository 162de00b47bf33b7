use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Glorot-uniform `fan_in × fan_out` matrix.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut crate::Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    t
}

/// Standard normal entries times `scale`.
pub fn scaled_normal(shape: &[usize], scale: f64, rng: &mut crate::Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * scale
    });
    t
}
