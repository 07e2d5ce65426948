//! Tensors, a reverse-mode tape, 1-D convolution kernels, seeded sampling
//! and the Adam optimizer.

mod adam;
pub mod kernels;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use rng::{derive_seed, fnv1a64, SeededRng};
pub use tape::{Gradients, StraightThrough, Tape, Var, DIFFERENTIABLE_OPS};
pub use tensor::Tensor;

/// Draws a tensor of i.i.d. standard Gumbel samples.
pub fn gumbel_sample(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gumbel()).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dimensions")
}

#[cfg(test)]
mod tests;
