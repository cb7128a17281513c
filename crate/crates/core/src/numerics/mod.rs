//! Dense matrices, stable elementwise kernels, parameter trees with a binary
//! checkpoint format, and a finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod ops;
mod params;

pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use matrix::{matmul, Matrix};
pub use ops::{cosine_sim, dot, glorot_uniform, log_sum_exp, norm, relu, softmax, softplus, softplus_inv};
pub(crate) use ops::{cosine_sim_backward, softmax_in_place};
pub(crate) use params::join_path;
pub use params::{Leaves, ParamTree};
