use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::norm;
use crate::{Error, Result};

/// A draw `u = r v` from the spherical uniform distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSample {
    pub u: Vec<f64>,
    pub r: f64,
    /// Unit direction.
    pub v: Vec<f64>,
}

/// Uniform direction on the unit sphere in `d` dimensions.
pub fn sample_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let len = norm(&z);
        if len > 1e-12 {
            return z.into_iter().map(|c| c / len).collect();
        }
    }
}

/// `count` draws with radius `r ~ U[0, tau_cap]` and uniform direction.
pub fn sample_source<R: Rng + ?Sized>(d: usize, count: usize, tau_cap: f64, rng: &mut R) -> Result<Vec<SourceSample>> {
    if d == 0 {
        return Err(Error::InvalidArgument("source dimension must be >= 1".into()));
    }
    if !(tau_cap > 0.0 && tau_cap <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau_cap {tau_cap} outside (0, 1]")));
    }
    Ok((0..count)
        .map(|_| {
            let r = rng.random_range(0.0..=tau_cap);
            let v = sample_direction(d, rng);
            SourceSample {
                u: v.iter().map(|c| r * c).collect(),
                r,
                v,
            }
        })
        .collect())
}

/// Source draws stacked as a `count x d` tensor.
pub fn source_tensor<R: Rng + ?Sized>(d: usize, count: usize, tau_cap: f64, rng: &mut R) -> Result<Tensor> {
    let s = sample_source(d, count, tau_cap, rng)?;
    Ok(Tensor::new(count, d, s.into_iter().flat_map(|s| s.u).collect()))
}
