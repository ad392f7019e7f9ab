//! Reverse-mode differentiation over a recorded tape, and the Adam optimizer.

mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckEntry, GradCheckReport};
pub use optim::{clip_global_norm, AdamConfig, AdamState, LrSchedule};
pub use params::{ParamId, ParamStore};
pub use tape::{AttentionSpec, Gradients, Op, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
