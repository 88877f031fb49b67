//! Numerical laboratory for the cutoff Boltzmann collision operator with soft
//! potentials: phase-space fields, the collision operator in direct and
//! spectral form, norm machinery, the norm-deflation construction and the
//! evolution solvers that tie them together.

pub mod error;
pub mod field;
pub mod collision;
pub mod quad;
pub mod norms;
pub mod solver;
pub mod deflation;
pub mod cli;

pub use error::{Error, Result};
