//! Weight initializers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// He-normal: N(0, sqrt(2 / fan_in)), the usual choice for ReLU stacks.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(rng, shape, std)
}

/// N(0, std) sampled via Box-Muller so we stay independent of distribution
/// crates' sampling internals.
pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}
