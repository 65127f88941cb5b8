//! Minimal reverse-mode differentiation engine over dense `f64` tensors.
//!
//! Forward operations are recorded on a [`Tape`]; [`Tape::backward`] replays
//! the record in reverse and returns [`Gradients`]. All arithmetic is 64-bit
//! and sequential, so forward and backward passes are bit-reproducible.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use conv::window_out;
pub use gradcheck::{grad_check, relative_error, CoordCheck, GradCheckReport};
pub use tape::{BnStats, Gradients, Tape, Var};
pub use tensor::Tensor;
