use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Simulator;
use crate::data::DataMatrix;
use crate::{Error, Result};

/// Values beyond this magnitude count as a diverged trajectory.
pub const DIVERGENCE_CAP: f64 = 1e6;

/// Heterogeneous-beliefs asset pricing model with four trader types.
///
/// Types 1 and 4 have fixed trend/bias `(g1, b1)` and `(g4, b4)`; the
/// inferred parameters are `theta = (g2, b2, g3, b3)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrockHommesConfig {
    pub beta: f64,
    pub h: usize,
    pub r: f64,
    pub sigma: f64,
    pub g1: f64,
    pub b1: f64,
    pub g4: f64,
    pub b4: f64,
    /// Recorded series length.
    pub t: usize,
    pub burn_in: usize,
}

impl Default for BrockHommesConfig {
    fn default() -> Self {
        Self {
            beta: 120.0,
            h: 4,
            r: 1.01,
            sigma: 0.04,
            g1: 0.0,
            b1: 0.0,
            g4: 1.01,
            b4: 0.0,
            t: 100,
            burn_in: 50,
        }
    }
}

/// Parameter value used to generate the pseudo-observed series.
pub const BROCK_HOMMES_THETA_STAR: [f64; 4] = [0.9, 0.2, 0.9, -0.2];

impl BrockHommesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h != 4 || self.r == 0.0 || !(self.sigma >= 0.0) || self.t < 3 {
            return Err(Error::InvalidArgument(format!(
                "brock-hommes config needs H = 4, R != 0, sigma >= 0, T >= 3: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Output of one run, optionally with the type fractions at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct BrockHommesRun {
    pub series: Vec<f64>,
    pub fractions: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrockHommesSimulator {
    pub config: BrockHommesConfig,
}

impl BrockHommesSimulator {
    pub fn new(config: BrockHommesConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn sample_prior_theta<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
        vec![
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(-1.0..0.0),
        ]
    }

    /// Runs the recursion from `x0 = x1 = x2 = 0`, discarding the burn-in.
    pub fn run<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R, keep_fractions: bool) -> Result<BrockHommesRun> {
        if theta.len() != 4 {
            return Err(Error::InvalidArgument(format!("theta has {} entries, expected 4", theta.len())));
        }
        let c = &self.config;
        let g = [c.g1, theta[0], theta[2], c.g4];
        let b = [c.b1, theta[1], theta[3], c.b4];
        let total = c.burn_in + c.t;
        let mut x = vec![0.0f64; 3];
        x.reserve(total);
        let mut fractions = Vec::new();
        for _ in 0..total {
            let k = x.len();
            let (xt, xt1, xt2) = (x[k - 1], x[k - 2], x[k - 3]);
            let mut a = [0.0; 4];
            for h in 0..4 {
                a[h] = c.beta * (xt - c.r * xt1) * (g[h] * xt2 + b[h] - c.r * xt1);
            }
            let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut w = a.map(|v| (v - amax).exp());
            let z: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= z);
            let eps: f64 = if c.sigma > 0.0 {
                c.sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let next = (0..4).map(|h| w[h] * (g[h] * xt + b[h])).sum::<f64>() / c.r + eps;
            if !next.is_finite() || next.abs() > DIVERGENCE_CAP {
                return Err(Error::Diverged {
                    theta: theta.to_vec(),
                    value: next.abs(),
                });
            }
            if keep_fractions {
                fractions.push(w);
            }
            x.push(next);
        }
        let series = x.split_off(3 + c.burn_in);
        if keep_fractions {
            fractions.drain(..c.burn_in);
        }
        Ok(BrockHommesRun { series, fractions })
    }
}

impl Simulator for BrockHommesSimulator {
    fn name(&self) -> &str {
        "brock_hommes"
    }

    fn theta_dim(&self) -> usize {
        4
    }

    fn d_x(&self) -> usize {
        1
    }

    fn n(&self) -> usize {
        self.config.t
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        Self::sample_prior_theta(rng)
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<DataMatrix> {
        Ok(DataMatrix::scalar_series(&self.run(theta, rng, false)?.series))
    }
}
