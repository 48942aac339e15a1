use rand::{Rng, RngCore};
use rand_distr::{ChiSquared, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Simulator;
use crate::data::DataMatrix;
use crate::{Error, Result};

/// Normal observations with a normal-inverse-chi-square prior on `(mu, sigma^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianConjugateConfig {
    pub mu0: f64,
    pub sigma0: f64,
    pub kappa: f64,
    pub nu0: f64,
    /// Observations per data set.
    pub n: usize,
    /// Infer `mu` only (`theta = (mu)`), integrating `sigma^2` out.
    pub mean_only: bool,
}

impl Default for GaussianConjugateConfig {
    fn default() -> Self {
        Self {
            mu0: 0.0,
            sigma0: 1.0,
            kappa: 2.0,
            nu0: 25.0,
            n: 2,
            mean_only: false,
        }
    }
}

impl GaussianConjugateConfig {
    pub fn with_n(n: usize) -> Self {
        Self {
            n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.kappa > 0.0 && self.nu0 > 2.0 && self.n >= 1) {
            return Err(Error::InvalidArgument(format!(
                "gaussian config needs sigma0 > 0, kappa > 0, nu0 > 2, n >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Prior mean of `sigma^2`, `nu0 sigma0^2 / (nu0 - 2)`.
    pub fn prior_mean_sigma2(&self) -> f64 {
        self.nu0 * self.sigma0 * self.sigma0 / (self.nu0 - 2.0)
    }

    /// Draws `sigma^2 = nu s^2 / chi2(nu)` and `mu | sigma^2 ~ N(m, sigma^2 / k)`.
    fn draw_nix<R: Rng + ?Sized>(m: f64, k: f64, nu: f64, s2: f64, rng: &mut R) -> [f64; 2] {
        let c: f64 = ChiSquared::new(nu).expect("nu > 0").sample(rng);
        let sigma2 = nu * s2 / c;
        let mu = m + (sigma2 / k).sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        [mu, sigma2]
    }

    /// Posterior hyperparameters for observed `x_1..x_n`.
    pub fn posterior(&self, x: &[f64]) -> Result<PosteriorOracle> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("posterior needs n >= 1".into()));
        }
        let n = x.len() as f64;
        let xbar = x.iter().sum::<f64>() / n;
        let ss: f64 = x.iter().map(|v| (v - xbar) * (v - xbar)).sum();
        let kappa_n = self.kappa + n;
        let nu_n = self.nu0 + n;
        let mu_n = (self.kappa * self.mu0 + n * xbar) / kappa_n;
        let shrink = self.kappa * n / kappa_n * (xbar - self.mu0).powi(2);
        let nu_sigma2 = self.nu0 * self.sigma0 * self.sigma0 + ss + shrink;
        Ok(PosteriorOracle {
            mu_n,
            kappa_n,
            nu_n,
            sigma2_n: nu_sigma2 / nu_n,
            mean_only: self.mean_only,
        })
    }
}

/// Normal-inverse-chi-square posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorOracle {
    pub mu_n: f64,
    pub kappa_n: f64,
    pub nu_n: f64,
    pub sigma2_n: f64,
    pub mean_only: bool,
}

impl PosteriorOracle {
    /// One draw of `(mu, sigma^2)`, or `(mu)` for a mean-only model.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let t = GaussianConjugateConfig::draw_nix(self.mu_n, self.kappa_n, self.nu_n, self.sigma2_n, rng);
        if self.mean_only {
            vec![t[0]]
        } else {
            t.to_vec()
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// Unnormalized log density of `(mu, sigma^2)`.
    pub fn log_density(&self, mu: f64, sigma2: f64) -> f64 {
        if sigma2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let a = self.nu_n / 2.0;
        -(a + 1.0) * sigma2.ln()
            - self.nu_n * self.sigma2_n / (2.0 * sigma2)
            - 0.5 * sigma2.ln()
            - self.kappa_n * (mu - self.mu_n).powi(2) / (2.0 * sigma2)
    }
}

/// Simulator wrapper with the prior as the parameter distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSimulator {
    pub config: GaussianConjugateConfig,
}

impl GaussianSimulator {
    pub fn new(config: GaussianConjugateConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl Simulator for GaussianSimulator {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn theta_dim(&self) -> usize {
        if self.config.mean_only {
            1
        } else {
            2
        }
    }

    fn d_x(&self) -> usize {
        1
    }

    fn n(&self) -> usize {
        self.config.n
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let c = &self.config;
        // sigma^2 stays in the latent vector even when only mu is inferred.
        GaussianConjugateConfig::draw_nix(c.mu0, c.kappa, c.nu0, c.sigma0 * c.sigma0, rng).to_vec()
    }

    fn simulate(&self, latent: &[f64], rng: &mut dyn RngCore) -> Result<DataMatrix> {
        let (mu, sigma2) = (latent[0], latent[1]);
        let normal = Normal::new(mu, sigma2.sqrt())
            .map_err(|e| Error::InvalidArgument(format!("observation law: {e}")))?;
        let xs: Vec<f64> = (0..self.config.n).map(|_| normal.sample(rng)).collect();
        Ok(DataMatrix::scalar_series(&xs))
    }

    fn observed_theta(&self, latent: &[f64]) -> Vec<f64> {
        latent[..self.theta_dim()].to_vec()
    }

    fn oracle(&self, x: &DataMatrix) -> Option<Result<PosteriorOracle>> {
        Some(self.config.posterior(x.values()))
    }
}
