//! Dense-array substrate: tensors, reverse-mode tape, layers and the finite-difference oracle.

pub mod gradcheck;
pub mod nn;
pub mod resample;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use nn::{glorot, mlp_forward, Activation, Linear, Mlp, ParamStore, Session};
pub use resample::{ResampleMap, UpsampleMode};
pub use tape::{Grads, Graph, Var};
pub use tensor::{matmul, sigmoid, softmax_rows, Tensor};
