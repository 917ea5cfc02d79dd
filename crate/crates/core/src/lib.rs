//! Transport coefficients of the Self-Organized Hydrodynamics for body
//! attitude coordination on SO(n).

pub mod error;
pub mod rotgeom;
pub mod torus;
pub mod gci_solver;
pub mod strongform;
pub mod coeffs;
pub mod montecarlo;
pub mod particle;
pub mod cli;

pub use error::{Error, Result};

/// Largest supported dimension.
pub const MAX_DIMENSION: usize = 11;
