//! Exact Brownian-tree laboratory for multidimensional backward stochastic
//! differential equations with bmo coefficients.
//!
//! The [`tree`] module supplies the discrete filtration; [`norms`] the process
//! spaces; [`linear`] the solvers for linear systems and matrix stochastic
//! exponentials; [`counterexample`] the sphere-valued non-uniqueness witness;
//! [`quadratic`] triangular quadratic drivers and their truncation scheme.

pub mod counterexample;
pub mod error;
pub mod linear;
pub mod norms;
pub mod quadratic;
pub mod tree;

pub use error::{LabError, Result};
