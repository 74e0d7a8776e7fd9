//! Lattice renormalisation-group engine for the n-component |phi|^4 model.
//!
//! The crate implements, exactly at desk scale, the algebraic machinery of the
//! rigorous RG map: finite-range covariance decompositions, Gaussian polynomial
//! calculus on two field alphabets, localisation onto symmetrised local
//! polynomials, polymer activities with the six-map RG step, and the
//! perturbative coupling flow with critical-point search.
//!
//! Start from the `examples/` directory for runnable entry points; the `rgpoly`
//! binary exposes the same capabilities behind a small CLI.

pub mod covariance;
pub mod error;
pub mod fieldalg;
pub mod flow;
pub mod geometry;
pub mod localisation;
pub mod norms;
pub mod potential;
pub mod rgmap;

pub use error::RgError;
