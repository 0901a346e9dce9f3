//! Dense tensors, differentiable primitives, parameters, and gradient checking.

mod gradcheck;
mod graph;
mod ops;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_all, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Precision, Var, LAYER_NORM_EPS};
pub use ops::{argmax, l2_normalize, scaled_dot_attention, softmax_rows, EPS_NORM};
pub use params::{ParamStore, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST};
pub use rng::Rng;
pub use tensor::Tensor;

pub(crate) use graph::log_sum_exp;
