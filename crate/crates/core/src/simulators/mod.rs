//! Source distribution, forward models and priors.

mod brock_hommes;
mod gaussian;
mod source;

use rand::RngCore;

pub use brock_hommes::{
    BrockHommesConfig, BrockHommesRun, BrockHommesSimulator, BROCK_HOMMES_THETA_STAR, DIVERGENCE_CAP,
};
pub use gaussian::{GaussianConjugateConfig, GaussianSimulator, PosteriorOracle};
pub use source::{sample_direction, sample_source, source_tensor, SourceSample};

use crate::data::{DataMatrix, TrainingTriple};
use crate::{io, Error, Result};

/// Prior redraws allowed per accepted simulation.
pub const MAX_REDRAWS: usize = 10_000;

/// A prior together with a likelihood that can be sampled.
pub trait Simulator {
    fn name(&self) -> &str;

    /// Dimension of the inferred parameter.
    fn theta_dim(&self) -> usize;

    fn d_x(&self) -> usize;

    /// Observations per simulated data set.
    fn n(&self) -> usize;

    /// Draws the full latent vector, which may carry nuisance coordinates.
    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn simulate(&self, latent: &[f64], rng: &mut dyn RngCore) -> Result<DataMatrix>;

    /// The inferred part of a latent vector.
    fn observed_theta(&self, latent: &[f64]) -> Vec<f64> {
        latent.to_vec()
    }

    /// Exact posterior, where one is available.
    fn oracle(&self, _x: &DataMatrix) -> Option<Result<PosteriorOracle>> {
        None
    }

    /// Draws `(theta, X)` from prior times likelihood, redrawing the
    /// parameter when the forward model diverges. Returns the number of
    /// rejected draws alongside.
    fn simulate_pair(&self, rng: &mut dyn RngCore) -> Result<(Vec<f64>, DataMatrix, usize)> {
        let mut rejected = 0;
        loop {
            let latent = self.sample_prior(rng);
            match self.simulate(&latent, rng) {
                Ok(x) => return Ok((self.observed_theta(&latent), x, rejected)),
                Err(Error::Diverged { .. }) if rejected < MAX_REDRAWS => rejected += 1,
                Err(e) => return Err(e),
            }
        }
    }
}

/// Simulated triples plus the count of diverged prior draws.
#[derive(Clone, Debug)]
pub struct SimulatedBatch {
    pub triples: Vec<TrainingTriple>,
    pub rejected: usize,
}

impl SimulatedBatch {
    pub fn rejection_rate(&self) -> f64 {
        let total = self.triples.len() + self.rejected;
        if total == 0 {
            0.0
        } else {
            self.rejected as f64 / total as f64
        }
    }
}

/// `count` triples `(theta, X, U)` with `U` from the unit-radius source.
pub fn simulate_batch<S: Simulator + ?Sized>(sim: &S, count: usize, rng: &mut dyn RngCore) -> Result<SimulatedBatch> {
    let d = sim.theta_dim();
    let mut triples = Vec::with_capacity(count);
    let mut rejected = 0;
    for _ in 0..count {
        let (theta, x, r) = sim.simulate_pair(rng)?;
        rejected += r;
        let u = sample_source(d, 1, 1.0, rng)?.remove(0).u;
        triples.push(TrainingTriple { theta, x, u });
    }
    Ok(SimulatedBatch { triples, rejected })
}

/// One row per triple: `theta*`, flattened `X` (observation-major), `U*`.
pub fn write_triples_csv<W: std::io::Write>(out: W, triples: &[TrainingTriple]) -> Result<()> {
    let Some(first) = triples.first() else {
        return io::write_matrix_csv(out, &[], &[]);
    };
    let d = first.theta.len();
    let nx = first.x.values().len();
    let mut header = io::numbered("theta", d);
    header.extend(io::numbered("x", nx));
    header.extend(io::numbered("u", d));
    let rows: Vec<Vec<f64>> = triples
        .iter()
        .map(|t| {
            let mut r = t.theta.clone();
            r.extend_from_slice(t.x.values());
            r.extend_from_slice(&t.u);
            r
        })
        .collect();
    if rows.iter().any(|r| r.len() != header.len()) {
        return Err(Error::InvalidArgument("triples have inconsistent sizes".into()));
    }
    io::write_matrix_csv(out, &header, &rows)
}
