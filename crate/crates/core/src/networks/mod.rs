//! The learnable pieces of `psi(u, x) = phi(u) + b(u)^T f(x)`.

mod features;
mod layers;
mod potential;

pub use features::{FeatureConfig, FeatureMap, FeatureNodes, Mode};
pub use layers::{DeepSet, Dense, Icnn, Lstm, Mlp};
pub(crate) use potential::check_source;
pub use potential::{ModelConfig, PotentialModel, MODEL_FORMAT, SUPPORT_TOL};
