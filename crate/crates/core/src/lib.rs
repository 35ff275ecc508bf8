//! Knowledge-distillation pre-training toolkit: a small autodiff engine, a
//! transformer LM, distillation losses, data selection, training schedules and
//! theory diagnostics.

pub mod diagnostics;
pub mod error;
pub mod evalx;
pub mod lm;
pub mod losses;
pub mod numcore;
pub mod select;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
