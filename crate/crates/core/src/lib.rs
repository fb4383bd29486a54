//! Neighborhood selection for Gaussian Markov random fields on 2-D lattices.

pub mod baselines;
pub mod benchmark;
pub mod bessel;
pub mod cls;
pub mod error;
pub mod lattice;
pub mod params;
mod qp;
pub mod risk;
pub mod select;
pub mod simulate;
pub mod spectral;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use lattice::{build_model_collection, LatticeSpec, ModelCollection, NeighborhoodModel, Offset, Sublattice};
pub use params::{covariance_from_theta, ConstraintSpec, ThetaField};
