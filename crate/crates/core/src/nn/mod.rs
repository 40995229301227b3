//! Minimal CPU tensor engine: dense 5D tensors, 3D convolution kernels,
//! tape-based reverse-mode differentiation and an adaptive optimizer.

mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{OptimizerConfig, Rmsprop};
pub use params::{Param, ParamInfo, ParamStore};
pub use tape::{Grads, Reduction, Tape, Var};
pub use tensor::Tensor;
