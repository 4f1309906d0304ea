//! Weight initialisation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor, TensorError};

/// Xavier (Glorot) uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples a rank-2 parameter `[fan_in, fan_out]` uniformly from the Xavier
/// interval using the caller's generator. Consumes one `f64` draw per
/// element in row-major order, so initialisation is reproducible for a given
/// generator state.
pub fn xavier_init<T: Scalar>(
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, TensorError> {
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "xavier_init",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let bound = xavier_bound(shape[0], shape[1]);
    let n = shape[0] * shape[1];
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(bound * (2.0 * rng.random::<f64>() - 1.0)))
        .collect();
    Tensor::parameter(data, shape)
}

/// Convenience wrapper seeding a fresh generator from `seed`.
pub fn xavier_init_seeded<T: Scalar>(
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<T>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_init(shape, &mut rng)
}
