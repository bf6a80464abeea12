use alloc::vec::Vec;

use rand::Rng;

use super::{Real, Tensor};

/// Uniform Glorot initialisation: `U(−b, b)` with `b = √(6 / (fan_in + fan_out))`.
///
/// The returned tensor requires gradients.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
    let numel = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("numel matches shape").with_grad()
}
