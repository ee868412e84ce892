//! Dense tensor arithmetic and reverse-mode differentiation.

mod check;
mod tape;
mod tensor;

pub use check::finite_difference_check;
pub use tape::{ParamId, ParamSet, SupportMask, Tape, Val};
pub use tensor::{sigmoid_scalar, Tensor};
