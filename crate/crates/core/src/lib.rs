//! Monte Carlo laboratory for backward SDEs with generators affine in `z`.
//!
//! The scheme builds `(Y, Z, Z̃, U, V)` by backward induction over blocks of
//! length `h = D·dt`, using the delayed control `Z̃_s = E[Z_{s+h} | F_s]` so
//! that every block only reads quantities computed on later blocks. The
//! diagnostics module turns the structural estimates satisfied by these
//! approximations into statistics with verdicts.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod condexp;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod problem_model;
pub mod scheme;
pub mod stats;
pub mod stochastic_basis;

pub use error::{Error, Result};
