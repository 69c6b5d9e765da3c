//! Dense matrices, seeded randomness, scalar activations, statistics and the
//! central-difference gradient oracle used by every other module.

mod funcs;
mod matrix;
mod rng;

pub use funcs::{
    cosine_sim, finite_diff_grad, mean, neg_log_sigmoid, population_std, relative_error, sigmoid, softplus, zscore,
};
pub use matrix::Matrix2D;
pub(crate) use matrix::{dot, softmax_in_place};
pub use rng::{derive_seed, SeededRng};
