use rand::Rng;

use super::real::Real;
use super::tensor::Tensor;

/// Kaiming-uniform init for relu layers: `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`.
pub fn kaiming_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

/// Xavier/Glorot-uniform init for linear output heads.
pub fn xavier_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

pub fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("numel matches shape")
}
