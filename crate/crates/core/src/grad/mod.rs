//! Dense tensors with a reverse-mode gradient tape.
//!
//! Every differentiable quantity in the crate lives in a [`Tensor`]. Ops
//! record themselves onto the implicit tape (the operand graph plus a
//! strictly increasing creation id per node) whenever an input requires
//! gradient; [`Tensor::backward`] replays the records in exact reverse
//! execution order. The tape is rebuilt on every forward pass.
//!
//! Tensors are deliberately not `Send`: a tape and its tensors stay on one
//! thread. Independent training runs on separate threads share nothing.

mod gradcheck;
mod ops;
mod sgd;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck, GradCheckReport};
pub use ops::{GatherIndices, PoolGroups};
pub use sgd::Sgd;
pub use tensor::Tensor;
