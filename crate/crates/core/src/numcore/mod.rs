//! Dense arrays and the reverse-mode autodiff engine.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use param::{Bindings, ParamId, ParamStore, Parameter};
pub use tape::{shifted_softplus, Tape, Value};
pub use tensor::Tensor;
