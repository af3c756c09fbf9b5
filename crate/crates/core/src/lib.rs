//! Markov operators from query-key bidivergences.
//!
//! A point cloud and an interaction matrix define a Gram matrix whose
//! diagonal split gives a pair of signed divergences. Exponentiating and
//! normalizing that pair yields attention maps, diffusion maps, their
//! bistochastic and magnetic variants, and one-step Schrodinger bridges.
//! The [`verify`] module checks the exact identities relating them.

pub mod bridges;
pub mod error;
pub mod geometry;
pub mod normalize;
pub mod operators;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{Bidivergence, DataCloud, GramMatrix, InteractionWeights};
pub use normalize::{ScalingPotentials, StochasticOperator, Stochasticity};
