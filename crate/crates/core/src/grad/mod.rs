//! Deterministic reverse-mode gradients over a fixed set of primitives, plus a
//! finite-difference harness to verify them.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{backward, finite_diff_check, forward, FdReport, ParamError};
pub use params::{Bound, GradRecord, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// Tensor with entries drawn uniformly from `[-scale, scale]`.
pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::raw(shape.to_vec(), v)
}
