//! Differentiable `f32` array engine and optimizer primitives.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use optim::{cosine_lr, sgd_step, OptimState};
pub use params::{Bound, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tape::{BatchStats, BnMode, Gradients, Tape, Var};
pub use tensor::Tensor;
