//! Minimal reverse-mode differentiation engine.
//!
//! Provides exactly the tensor operations the fusion network and the
//! training objectives need, plus a central-difference gradient checker.

mod dropout;
pub mod gradcheck;
mod tape;
mod tensor;

pub use dropout::{DropoutMode, FrozenMasks};
pub use gradcheck::{grad_check, GradCheckReport, Objective};
pub use tape::{gelu_scalar, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::dot;
