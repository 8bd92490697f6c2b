//! Joint zero-inflated gamma (JZIG) coregionalization of sparse plot
//! measurements with a gridded satellite biomass product.
//!
//! Spatial effects are Matérn (ν = 1) Gaussian fields represented on
//! triangular meshes through the SPDE/GMRF construction; inference runs a
//! Laplace-within-Gibbs sampler.

pub mod diagnostics;
pub mod config;
pub mod error;
pub mod io;
pub mod mesh;
pub mod model;
pub mod par;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod sparse;
pub mod spde;
pub mod validation;
pub mod synth;

pub use error::{Error, Result};
pub use mesh::Location;
