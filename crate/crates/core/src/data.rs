use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Observed data `X` with `d_x` rows and `n` observation columns.
///
/// Stored observation-major: the `d_x` values of observation `j` are
/// contiguous, so a batch of matrices concatenates into an `(b * n) x d_x`
/// tensor without copying per element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    d_x: usize,
    n: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    pub fn from_observations(d_x: usize, values: Vec<f64>) -> Result<Self> {
        if d_x == 0 || values.is_empty() || values.len() % d_x != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form observations of dimension {d_x}",
                values.len()
            )));
        }
        Ok(Self {
            d_x,
            n: values.len() / d_x,
            values,
        })
    }

    /// One-dimensional observations `x_1..x_n`.
    pub fn scalar_series(values: &[f64]) -> Self {
        Self::from_observations(1, values.to_vec()).expect("non-empty series")
    }

    /// `n` copies of the scalar `x`.
    pub fn replicated(x: f64, n: usize) -> Self {
        Self::scalar_series(&vec![x; n.max(1)])
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observation(&self, j: usize) -> &[f64] {
        &self.values[j * self.d_x..(j + 1) * self.d_x]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Returns a copy with observations reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for &j in perm {
            values.extend_from_slice(self.observation(j));
        }
        Self {
            d_x: self.d_x,
            n: self.n,
            values,
        }
    }

    /// Stacks all observations of a batch as rows of a `(b * n) x d_x` tensor.
    pub(crate) fn stack_observations(batch: &[&DataMatrix]) -> Tensor {
        let d_x = batch[0].d_x;
        let mut data = Vec::with_capacity(batch.len() * batch[0].values.len());
        for x in batch {
            data.extend_from_slice(&x.values);
        }
        Tensor::new(data.len() / d_x, d_x, data)
    }

    /// Observation `t` of every batch member as rows of a `b x d_x` tensor.
    pub(crate) fn step(batch: &[&DataMatrix], t: usize) -> Tensor {
        let d_x = batch[0].d_x;
        let mut data = Vec::with_capacity(batch.len() * d_x);
        for x in batch {
            data.extend_from_slice(x.observation(t));
        }
        Tensor::new(batch.len(), d_x, data)
    }
}

/// One simulated record `(theta, X, U)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple {
    pub theta: Vec<f64>,
    pub x: DataMatrix,
    pub u: Vec<f64>,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
