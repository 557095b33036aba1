//! Dense real linear algebra: matrices, Cholesky, SVD, triangular solves.
//!
//! Everything is computed in `f64`. All functions are pure.

mod cholesky;
mod matrix;
mod svd;
mod triangular;

pub use cholesky::{cholesky, CholeskyFactor, DampingPolicy};
pub use matrix::{frobenius_norm, Matrix};
pub use svd::{svd, SvdResult, MAX_SWEEPS};
pub use triangular::{solve_lower, solve_lower_transposed, solve_lower_triangular};
