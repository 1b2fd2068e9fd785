//! Minimal reverse-mode array engine and AdamW optimizer.

mod checkpoint;
mod error;
mod gemm;
mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_FORMAT};
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use optim::{adamw_step, adamw_step_all, OptimConfig};
pub use param::{AdamState, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{Tape, Var, Window};
pub(crate) use tape::focal_term;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
