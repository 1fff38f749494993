//! Dense tensors, reverse-mode differentiation, and finite-difference checks.

pub mod gradcheck;
pub mod kernels;
pub mod params;
mod tape;
mod tensor;

pub use tape::{ComputationRecord, NodeId, Tape};
pub use tensor::{Scalar, Tensor};

use rand::Rng;

/// Uniform values in `[-1, 1]` for a tensor of the given shape.
pub fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape, values).expect("shape is valid")
}
