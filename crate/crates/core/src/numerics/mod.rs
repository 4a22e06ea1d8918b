//! Deterministic dense linear algebra, a minimal reverse-mode tape, and
//! the finite-difference gradient checker that guards it.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use rng::Rng;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor2D;

/// Bounds applied to encoder log-variances before exponentiation; the lower
/// bound doubles as the zero-variance guard.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);
