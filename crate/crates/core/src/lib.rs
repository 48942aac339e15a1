//! Likelihood-free posterior sampling with learned conditional vector quantiles.
//!
//! A [`PotentialModel`] holds a potential `psi(u, x) = phi(u) + b(u)^T f(x)`
//! that is convex in `u`; its gradient pushes the spherical-uniform source
//! onto the posterior of `theta` given data `x`.

pub mod autodiff;
pub mod baselines;
pub mod data;
mod error;
pub mod eval;
pub mod io;
pub mod networks;
pub mod quantile;
pub mod simulators;
pub mod training;

pub use data::{DataMatrix, TrainingTriple};
pub use error::{Error, Result};
pub use networks::{FeatureConfig, Mode, ModelConfig, PotentialModel};
pub use simulators::Simulator;
