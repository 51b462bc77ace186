//! Latent neural ODEs with time-invariant content and dynamics-modulator
//! variables: data generation, differentiable integration, amortized
//! variational training, and evaluation exports.

pub mod container;
pub mod datagen;
pub mod diffnum;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nets;
pub mod objective;
pub mod odeint;
pub mod train;

pub use error::{Error, Result};
