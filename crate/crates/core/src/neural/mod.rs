//! Dense linear algebra, losses and optimisation for the toy model.

mod gradcheck;
mod loss;
mod matrix;
mod optim;

pub use gradcheck::{gradient_check, gradient_check_at, RELATIVE_ERROR_FLOOR};
pub use loss::masked_cross_entropy;
pub(crate) use matrix::{gemm_acc, gemm_tn_acc, softmax_in_place};
pub use matrix::{matmul, row_softmax, Matrix};
pub use optim::{optimizer_step, OptimizerConfig, Param, ParamId, ParamStore};
