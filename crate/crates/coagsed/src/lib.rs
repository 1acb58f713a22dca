//! Numerical laboratory for coagulation with fast sedimentation transport.
//!
//! The model is
//!
//! ```text
//! ∂t H + (1/ε) ∂y[(v^α − y) H] = K[H]
//! ```
//!
//! where `K[H]` is the Smoluchowski operator acting pointwise in `y`. The
//! crate provides two solvers (Picard iteration on the mild formulation and a
//! transport/coagulation splitting integrator), the characteristic system used
//! to build supersolutions, the one-dimensional diagonal-kernel limit, and a
//! set of checks that turn the analytical bounds into falsifiable tests.

pub mod characteristics;
pub mod cli;
pub mod coagulation;
pub mod diagnostics;
pub mod diagonal_limit;
pub mod error;
pub mod grid_fields;
pub mod kernels;
pub mod mild_solver;
pub mod splitting_solver;
pub mod transport;

pub use error::{Error, Result};
