//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates adjoints. Only the handful of operations the
//! translation models need are provided, and shapes are explicit everywhere
//! except the row-wise bias add.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{AttnLayout, AttnSegment, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::renorm_row;
