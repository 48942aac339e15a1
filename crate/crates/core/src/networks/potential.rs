use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureConfig, FeatureMap, Mode};
use super::layers::Icnn;
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor, Wrt};
use crate::data::{norm, DataMatrix};
use crate::{io, Error, Result};

pub const MODEL_FORMAT: &str = "qbayes-potential";

/// Tolerance on `||u|| <= 1` for source points.
pub const SUPPORT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Parameter dimension.
    pub d: usize,
    pub icnn_width: usize,
    pub icnn_layers: usize,
    pub features: FeatureConfig,
}

impl ModelConfig {
    /// Three hidden layers of width 64.
    pub fn desk(d: usize, features: FeatureConfig) -> Self {
        Self {
            d,
            icnn_width: 64,
            icnn_layers: 3,
            features,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.icnn_width == 0 || self.icnn_layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "model needs d, width and layers >= 1 (got {}, {}, {})",
                self.d, self.icnn_width, self.icnn_layers
            )));
        }
        if self.features.d_x == 0 {
            return Err(Error::InvalidArgument("d_x must be >= 1".into()));
        }
        Ok(())
    }
}

/// `psi(u, x) = phi(u) + b(u)^T f(x)` with ICNNs `phi` (scalar) and `b` (`q` outputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub phi: Icnn,
    pub b: Option<Icnn>,
    pub features: FeatureMap,
}

pub(crate) fn check_source(u: &[f64]) -> Result<()> {
    let r = norm(u);
    if !(r <= 1.0 + SUPPORT_TOL) {
        return Err(Error::OutsideSupport(r));
    }
    Ok(())
}

impl PotentialModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (d, w, l) = (config.d, config.icnn_width, config.icnn_layers);
        let phi = Icnn::new(&mut params, rng, "phi", d, w, l, 1);
        let q = config.features.q();
        let b = (q > 0).then(|| Icnn::new(&mut params, rng, "b", d, w, l, q));
        let features = FeatureMap::new(&mut params, rng, config.features.clone());
        Ok(Self {
            config,
            params,
            phi,
            b,
            features,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn q(&self) -> usize {
        self.config.features.q()
    }

    pub fn d_x(&self) -> usize {
        self.config.features.d_x
    }

    pub fn mode(&self) -> Mode {
        self.features.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.features.mode = mode;
    }

    pub(crate) fn apply_phi(&self, g: &mut Graph, u: NodeId) -> NodeId {
        self.phi.apply(g, u)
    }

    pub(crate) fn apply_b(&self, g: &mut Graph, u: NodeId) -> Option<NodeId> {
        self.b.as_ref().map(|b| b.apply(g, u))
    }

    /// Row-wise `psi` for the `N x d` node `u` and a `1 x q` (shared) or
    /// `N x q` (per row) feature node.
    pub(crate) fn psi_rows(&self, g: &mut Graph, u: NodeId, feats: Option<NodeId>) -> NodeId {
        let phi = self.apply_phi(g, u);
        match (self.apply_b(g, u), feats) {
            (Some(bu), Some(f)) => {
                let prod = g.mul(bu, f);
                let ones = g.constant(Tensor::full(self.q(), 1, 1.0));
                let inner = g.matmul(prod, ones);
                g.add(phi, inner)
            }
            _ => phi,
        }
    }

    /// Inference-mode features `f(x)`.
    pub fn features_of(&self, x: &DataMatrix) -> Result<Vec<f64>> {
        if !x.is_finite() {
            return Err(Error::NonFinite("data matrix".into()));
        }
        self.features.features(&self.params, x)
    }

    fn check_features(&self, feats: &[f64]) -> Result<()> {
        if feats.len() != self.q() {
            return Err(Error::InvalidArgument(format!(
                "{} features supplied, model has q = {}",
                feats.len(),
                self.q()
            )));
        }
        Ok(())
    }

    fn check_sources(&self, us: &Tensor) -> Result<()> {
        if us.cols() != self.d() {
            return Err(Error::InvalidArgument(format!(
                "source points have dimension {}, model has d = {}",
                us.cols(),
                self.d()
            )));
        }
        (0..us.rows()).try_for_each(|i| check_source(us.row_slice(i)))
    }

    /// Builds the graph summing `psi` over the rows of `us`.
    fn psi_graph(&self, us: &Tensor, feats: &[f64]) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let u = g.input("u", us.rows(), self.d());
        let f = (self.q() > 0).then(|| g.constant(Tensor::row(feats)));
        let rows = self.psi_rows(&mut g, u, f);
        let total = g.sum(rows);
        (g, rows, total)
    }

    /// `psi(u_i, x)` for every row of `us`, given precomputed features.
    pub fn psi_with_features(&self, us: &Tensor, feats: &[f64]) -> Result<Vec<f64>> {
        self.check_sources(us)?;
        self.check_features(feats)?;
        let (mut g, rows, _) = self.psi_graph(us, feats);
        g.forward(&self.params, &[("u", us)])?;
        Ok(g.value(rows).expect("evaluated").data().to_vec())
    }

    /// `grad_u psi(u_i, x)` for every row of `us` (`N x d`). Rows do not
    /// interact in inference mode, so one backward pass serves the batch.
    pub fn grad_with_features(&self, us: &Tensor, feats: &[f64]) -> Result<Tensor> {
        self.check_sources(us)?;
        self.check_features(feats)?;
        let (mut g, _, total) = self.psi_graph(us, feats);
        g.forward(&self.params, &[("u", us)])?;
        let mut grads = g.backward(total, Wrt::Input("u"))?;
        Ok(grads
            .take_input("u")
            .unwrap_or_else(|| Tensor::zeros(us.rows(), self.d())))
    }

    pub fn potential_eval(&self, u: &[f64], x: &DataMatrix) -> Result<f64> {
        check_source(u)?;
        let feats = self.features_of(x)?;
        Ok(self.psi_with_features(&Tensor::row(u), &feats)?[0])
    }

    pub fn potential_grad_u(&self, u: &[f64], x: &DataMatrix) -> Result<Vec<f64>> {
        check_source(u)?;
        let feats = self.features_of(x)?;
        Ok(self.grad_with_features(&Tensor::row(u), &feats)?.into_data())
    }

    /// Pushes every source row through `grad_u psi(., x)`.
    pub fn push_forward(&self, us: &Tensor, x: &DataMatrix) -> Result<Tensor> {
        let feats = self.features_of(x)?;
        self.grad_with_features(us, &feats)
    }

    /// `phi(u)` alone.
    pub fn phi_value(&self, u: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let un = g.constant(Tensor::row(u));
        self.apply_phi(&mut g, un);
        Ok(g.forward(&self.params, &[])?.item())
    }

    /// `b(u)` alone (empty when `q = 0`).
    pub fn b_value(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let un = g.constant(Tensor::row(u));
        if self.apply_b(&mut g, un).is_none() {
            return Ok(Vec::new());
        }
        Ok(g.forward(&self.params, &[])?.data().to_vec())
    }

    /// Adds `c` to the output bias of `phi`.
    pub fn shift_phi(&mut self, c: f64) {
        let last = *self.phi.bias.last().expect("phi has an output bias");
        self.params.get_mut(last).data_mut()[0] += c;
    }

    /// Fraction of random pairs violating midpoint convexity of
    /// `u -> psi(u, x)` by more than `1e-9`.
    pub fn convexity_violation_rate(&self, feats: &[f64], pairs: usize, rng: &mut impl Rng) -> Result<f64> {
        let src = crate::simulators::sample_source(self.d(), 2 * pairs, 1.0, rng)?;
        let mut rows = Vec::with_capacity(3 * pairs);
        for pair in src.chunks(2) {
            let (a, b) = (&pair[0].u, &pair[1].u);
            let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
            rows.extend([a.clone(), b.clone(), m]);
        }
        if rows.is_empty() {
            return Ok(0.0);
        }
        let psi = self.psi_with_features(&Tensor::from_rows(&rows), feats)?;
        let bad = psi
            .chunks(3)
            .filter(|c| c[2] > 0.5 * (c[0] + c[1]) + 1e-9)
            .count();
        Ok(bad as f64 / pairs as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json(MODEL_FORMAT, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        io::from_json(MODEL_FORMAT, text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save_json(path, MODEL_FORMAT, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::load_json(path, MODEL_FORMAT)
    }
}
