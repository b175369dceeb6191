//! Small reverse-mode differentiation engine: tensors, a define-by-run
//! graph with the convolution / spatial-softmax / dense operations the
//! policies need, parameter storage with a binary checkpoint format, and
//! Adam.

pub mod gradcheck;
mod graph;
pub mod init;
mod nn;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{Conv2dSpec, Graph, Var};
pub use nn::Activation;
pub use optim::{adam_step, AdamConfig, OptimState};
pub use params::{Bound, ParamId, ParamStore, Parameter, CHECKPOINT_MAGIC};
pub use real::Real;
pub use tensor::Tensor;
