//! Differentiable-numerics substrate: dense tensors, a reverse-mode tape
//! over a closed op set, and the AdamW/cosine/clipping optimizer stack.
//!
//! A tape and the parameters bound to it are single-owner for the duration
//! of a training step; independent tape/parameter pairs can run in parallel
//! because every operation here is pure.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, cosine_lr, grad_check, OptimConfig, OptimState};
pub use params::{Bound, GradSet, InitKind, ParamSet, ParamSpec};
pub use tape::{logistic_log_pdf, sigmoid, Activation, Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
