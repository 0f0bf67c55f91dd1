//! Sparse Gaussian-process regression and classification with pseudo-points,
//! fitted by Power Expectation Propagation.
//!
//! The power `α` interpolates between the variational free energy (`α → 0`)
//! and EP/FITC (`α = 1`). Regression has a collapsed closed form
//! ([`energy`]); classification runs the iterative site updates in [`pep`].

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod energy;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod pep;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
pub use kernel::KernelHyper;
