//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Enough machinery to train every conditioned-head component and to verify
//! all gradients against central finite differences: matrix products, 3×3
//! convolutions, temperature softmax, the two losses, convex parameter
//! aggregation, and Adam.

mod gradcheck;
pub mod kernels;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with, GRADCHECK_H};
pub use ops::{bce_logits, conv2d, matmul, smooth_l1, softmax_temp};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Fan-in-scaled uniform init U(−√(1/fan_in), √(1/fan_in)) from a seeded RNG.
pub fn init_uniform(rng: &mut impl rand::Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}
