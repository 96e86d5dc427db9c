//! Differentiable computation substrate: dense tensors, a reverse-mode tape,
//! deterministic counter-based randomness, and a finite-difference gradient
//! checker used by every other module's tests.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, CheckReport};
pub use rng::{DrawCursor, RngStream};
pub use tape::{Grads, GradSink, Tape, Var};
pub use tensor::Tensor;
