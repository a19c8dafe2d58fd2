//! Dense tensors, a reverse-mode tape, gradient checking, and SGD.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use optim::{adam_step, sgd_step, AdamState, SgdConfig};
pub use params::{Bindings, Param, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
