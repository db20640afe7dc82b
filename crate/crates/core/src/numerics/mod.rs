//! Dense tensors, parameters, hand-written backward kernels and gradient checks.

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod param;
pub mod rng;
pub mod tensor;

pub use gradcheck::gradcheck;
pub use param::{Grads, ParamGroup, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;
