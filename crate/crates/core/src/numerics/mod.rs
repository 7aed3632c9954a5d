//! Dense tensor math, reverse-mode gradients and the Adam optimizer.

pub mod gradcheck;
pub mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use ops::{
    affine, affine_transposed, cross_entropy, gelu, layer_norm, softmax_rows, LAYER_NORM_EPS,
};
pub use optim::{adam_step, clip_grad_norm, lr_schedule, AdamConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var, MASKED_LOGIT};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
