//! Numerical engine for the Radner equilibrium of an exponential-utility
//! exchange economy with a single annuity, characterized by a coupled
//! quadratic BSDE system `((a, Y), (σ, Z))`.
//!
//! The system is solved through its Markovian PDE representation
//! `u_t + 𝒜u − f(t, x, u, Du·Σ) = 0` on a lattice ([`pde_solver`]),
//! cross-checked against a heat-kernel fixed-point oracle
//! ([`picard_kernel`]), and turned into prices, strategies and
//! clearing/optimality diagnostics ([`equilibrium`], [`simulate`]).

pub mod bounds;
pub mod drivers;
pub mod equilibrium;
pub mod error;
pub mod linalg;
pub mod model;
pub mod pde_solver;
pub mod picard_kernel;
pub mod report;
pub mod simulate;

pub use error::{Error, Result};

/// Crate version embedded in every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
