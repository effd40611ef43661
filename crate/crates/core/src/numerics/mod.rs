//! Dense `f32` tensors, a reverse-mode tape, seeded randomness and Adam-family
//! optimizers. Everything else in the crate is built on these.

mod conv;
pub mod gradcheck;
mod kernels;
mod optim;
mod params;
mod resample;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{fd_check, fd_check4};
pub use conv::{ConvSpec, PadMode};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use resample::Interp;
pub use rng::Rng;
pub use tape::{Counters, Gradients, RopeTable, Tape, Var};
pub use tensor::Tensor;
