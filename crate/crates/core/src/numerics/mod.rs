//! Dense float32 tensors and a reverse-mode tape.
//!
//! The engine is deliberately small: eager evaluation, a flat node arena,
//! and a backward pass that emits adjoints as ordinary tape nodes. Because
//! adjoints are nodes, they can themselves be differentiated, which is what
//! the condensation loop needs to push gradients through unrolled SGD steps.
//!
//! Everything computes in f32. f64 appears only inside the finite-difference
//! oracles, where the quotient would otherwise lose half its digits.

pub mod check;
pub mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use check::{fd_gradient, finite_difference_check};
pub use kernels::avg_pool_1d;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
