//! Dense `f64` tensors, a recording tape with reverse-mode gradients, a
//! finite-difference gradient checker and the seeded random streams used
//! everywhere else.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, ABS_FALLBACK};
pub use rng::{derive_seed, splitmix64, Rng};
pub use tape::{Gradients, NodeId, Primitive, Tape};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;
