//! Simulation and verification toolkit for multicolor Pólya urns, their
//! Dirichlet limits and Gaussian approximations.

pub mod approx;
pub mod dirichlet;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod rng;
pub mod stats;
pub mod urn;

pub use error::{Error, Result};
