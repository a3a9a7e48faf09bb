//! Dense tensors, a reverse-mode tape and the AdamW optimizer.

mod adamw;
mod gradcheck;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, InputCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
