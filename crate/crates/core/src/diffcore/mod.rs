//! Dense `f64` tensors, a recording tape for reverse-mode differentiation,
//! SGD, and a finite-difference gradient checker.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_many};
pub use optim::{sgd_step, Sgd};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;
