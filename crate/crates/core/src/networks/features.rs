use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{DeepSet, Lstm};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::data::DataMatrix;
use crate::{Error, Result};

/// How features are centered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Center by the batch mean and track it in the running mean.
    Training,
    /// Center by the stored running mean.
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Dimension of one observation.
    pub d_x: usize,
    /// DeepSet output size (0 disables the DeepSet branch).
    pub q1: usize,
    /// LSTM hidden size (0 disables the LSTM branch).
    pub q2: usize,
    pub deepset_width: usize,
    pub deepset_latent: usize,
}

impl FeatureConfig {
    pub fn deepset(d_x: usize, q1: usize) -> Self {
        Self {
            d_x,
            q1,
            q2: 0,
            deepset_width: 64,
            deepset_latent: 64,
        }
    }

    pub fn q(&self) -> usize {
        self.q1 + self.q2
    }
}

/// Graph nodes produced by [`FeatureMap::build`].
#[derive(Clone, Copy, Debug)]
pub struct FeatureNodes {
    /// Centered features, `b x q`.
    pub centered: NodeId,
    /// Batch mean of the raw features (training mode only).
    pub batch_mean: Option<NodeId>,
}

/// Learned summary statistic `f(X) = [h1(X), h2(X)]`, centered to mean zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub config: FeatureConfig,
    pub deepset: Option<DeepSet>,
    pub lstm: Option<Lstm>,
    pub running_mean: Vec<f64>,
    pub momentum: f64,
    pub mode: Mode,
}

impl FeatureMap {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: FeatureConfig) -> Self {
        let deepset = (config.q1 > 0).then(|| {
            DeepSet::new(
                store,
                rng,
                config.d_x,
                config.deepset_width,
                config.deepset_latent,
                config.q1,
            )
        });
        let lstm = (config.q2 > 0).then(|| Lstm::new(store, rng, config.d_x, config.q2));
        let q = config.q();
        Self {
            config,
            deepset,
            lstm,
            running_mean: vec![0.0; q],
            momentum: 0.9,
            mode: Mode::Training,
        }
    }

    pub fn q(&self) -> usize {
        self.config.q()
    }

    fn check_batch(&self, batch: &[&DataMatrix]) -> Result<usize> {
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty feature batch".into()))?;
        let n = first.n();
        for x in batch {
            if x.d_x() != self.config.d_x {
                return Err(Error::InvalidArgument(format!(
                    "data has {} rows, feature map expects {}",
                    x.d_x(),
                    self.config.d_x
                )));
            }
            if x.n() != n {
                return Err(Error::InvalidArgument(
                    "all data in one feature batch must have the same n".into(),
                ));
            }
        }
        Ok(n)
    }

    /// Adds the feature computation for `batch` to `g`. Returns `None` when
    /// `q = 0`.
    pub fn build(&self, g: &mut Graph, batch: &[&DataMatrix], mode: Mode) -> Result<Option<FeatureNodes>> {
        let n = self.check_batch(batch)?;
        if self.q() == 0 {
            return Ok(None);
        }
        let mut parts = Vec::new();
        if let Some(ds) = &self.deepset {
            let obs = g.constant(DataMatrix::stack_observations(batch));
            parts.push(ds.apply(g, obs, n));
        }
        if let Some(lstm) = &self.lstm {
            let steps: Vec<NodeId> = (0..n)
                .map(|t| g.constant(DataMatrix::step(batch, t)))
                .collect();
            parts.push(lstm.apply(g, &steps));
        }
        let raw = match parts[..] {
            [a] => a,
            [a, b] => g.concat_cols(a, b),
            _ => unreachable!(),
        };
        Ok(Some(match mode {
            Mode::Training => {
                let m = g.col_mean(raw);
                FeatureNodes {
                    centered: g.sub(raw, m),
                    batch_mean: Some(m),
                }
            }
            Mode::Inference => {
                let m = g.constant(Tensor::row(&self.running_mean));
                FeatureNodes {
                    centered: g.sub(raw, m),
                    batch_mean: None,
                }
            }
        }))
    }

    /// Folds a batch mean into the running mean.
    pub fn update_running_mean(&mut self, batch_mean: &Tensor) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean.data()) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    /// Sets the running mean to the exact raw feature mean of `batch`.
    pub fn calibrate(&mut self, params: &ParamStore, batch: &[&DataMatrix]) -> Result<()> {
        let mut g = Graph::new();
        if let Some(nodes) = self.build(&mut g, batch, Mode::Training)? {
            g.forward(params, &[])?;
            let m = nodes.batch_mean.expect("training mode");
            self.running_mean = g.value(m).expect("evaluated").data().to_vec();
        }
        Ok(())
    }

    /// Evaluates the centered features of a batch (`b x q`). In training mode
    /// the running mean is updated.
    pub fn forward(&mut self, params: &ParamStore, batch: &[&DataMatrix], mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let Some(nodes) = self.build(&mut g, batch, mode)? else {
            return Ok(Tensor::zeros(batch.len(), 0));
        };
        g.forward(params, &[])?;
        if let Some(m) = nodes.batch_mean {
            let m = g.value(m).expect("evaluated").clone();
            self.update_running_mean(&m);
        }
        Ok(g.value(nodes.centered).expect("evaluated").clone())
    }

    /// Centered features of a single data matrix in inference mode.
    pub fn features(&self, params: &ParamStore, x: &DataMatrix) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let Some(nodes) = self.build(&mut g, &[x], Mode::Inference)? else {
            self.check_batch(&[x])?;
            return Ok(Vec::new());
        };
        g.forward(params, &[])?;
        Ok(g.value(nodes.centered).expect("evaluated").data().to_vec())
    }
}
