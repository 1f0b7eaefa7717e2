//! Dense `f64` tensors, reverse-mode gradients, Adam and a
//! finite-difference gradient checker.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry,
};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, Sampling, DEFAULT_EPSILON};
pub use graph::{log_sigmoid, sigmoid, Graph, Var};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor};

use rand::Rng;

/// Uniform initialisation in `[-bound, bound)`.
pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}
