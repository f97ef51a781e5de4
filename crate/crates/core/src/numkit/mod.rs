//! Minimal dense linear algebra: matrix storage, products, norms, seeded
//! random initialization, and small-matrix singular values.
//!
//! Everything here is a pure function of its inputs; values are safe to share
//! read-only across threads. The only stateful object is [`Rng`], which is
//! single-owner.

mod matrix;
mod rng;
mod svd;

pub use matrix::{outer, Matrix};
pub use rng::{gaussian_matrix, kaiming_uniform, Rng};
pub use svd::{numerical_rank, svd_values};
