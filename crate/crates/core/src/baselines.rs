//! Autoregressive chain of one-dimensional implicit quantile networks trained
//! with the pinball (CRPS) loss.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, LrSchedule, NodeId, ParamStore, Tensor, Wrt};
use crate::data::DataMatrix;
use crate::networks::{FeatureConfig, FeatureMap, Mlp, Mode};
use crate::simulators::Simulator;
use crate::{io, Error, Result};

pub const CHAIN_FORMAT: &str = "qbayes-autoregressive";

/// Bisection steps used to invert a network in `tau`.
const BISECTION_STEPS: usize = 40;
const TAU_EPS: f64 = 1e-6;

/// `(tau - 1{z < q}) (z - q)`.
pub fn pinball_loss(tau: f64, q: f64, z: f64) -> f64 {
    let ind = if z < q { 1.0 } else { 0.0 };
    (tau - ind) * (z - q)
}

/// Monte Carlo CRPS `(2 / K) sum_k pinball(tau_k, q(tau_k), z)` with
/// `tau_k ~ U(0, 1)`.
pub fn crps_mc_loss<F>(mut quantile: F, z: f64, rng: &mut dyn RngCore, k: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..k {
        let tau: f64 = rng.random();
        total += pinball_loss(tau, quantile(tau)?, z);
    }
    Ok(2.0 * total / k as f64)
}

/// Conditioning summary used by the chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ChainFeatures {
    /// Per-dimension sample mean and standard deviation of the observations.
    MeanStd { d_x: usize },
    /// Learned summary, trained together with the first network and then frozen.
    Learned(FeatureMap),
}

impl ChainFeatures {
    pub fn dim(&self) -> usize {
        match self {
            ChainFeatures::MeanStd { d_x } => 2 * d_x,
            ChainFeatures::Learned(f) => f.q(),
        }
    }
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 when `n = 1`)
/// of every observation coordinate.
pub fn mean_std(x: &DataMatrix) -> Vec<f64> {
    let (d, n) = (x.d_x(), x.n());
    let mut out = vec![0.0; 2 * d];
    for j in 0..n {
        for (k, v) in x.observation(j).iter().enumerate() {
            out[k] += v / n as f64;
        }
    }
    if n > 1 {
        for j in 0..n {
            for (k, v) in x.observation(j).iter().enumerate() {
                out[d + k] += (v - out[k]).powi(2) / (n - 1) as f64;
            }
        }
        for s in &mut out[d..] {
            *s = s.sqrt();
        }
    }
    out
}

/// Maps `(tau, conditioning)` to a scalar quantile estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinballNet {
    pub mlp: Mlp,
    /// Length of the conditioning vector (features plus earlier coordinates).
    pub cond_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    MeanStd,
    Learned(FeatureConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub width: usize,
    pub hidden_layers: usize,
    pub epochs: u32,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// `ordering[k]` is the parameter index modelled by the `k`-th network.
    pub ordering: Option<Vec<usize>>,
    pub features: FeatureKind,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            width: 64,
            hidden_layers: 3,
            epochs: 30,
            iters_per_epoch: 100,
            batch: 128,
            seed: 0,
            schedule: LrSchedule {
                base: 0.01,
                decay: 0.9,
            },
            ordering: None,
            features: FeatureKind::MeanStd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoRegChain {
    pub d: usize,
    pub d_x: usize,
    pub ordering: Vec<usize>,
    pub params: ParamStore,
    pub nets: Vec<PinballNet>,
    pub features: ChainFeatures,
    /// Mean CRPS per epoch, one list per network.
    pub history: Vec<Vec<f64>>,
}

impl AutoRegChain {
    fn new(d: usize, d_x: usize, cfg: &ChainConfig, rng: &mut impl Rng) -> Result<Self> {
        let ordering = cfg.ordering.clone().unwrap_or_else(|| (0..d).collect());
        let mut sorted = ordering.clone();
        sorted.sort_unstable();
        if sorted != (0..d).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!("ordering {ordering:?} is not a permutation of 0..{d}")));
        }
        if cfg.width == 0 || cfg.hidden_layers == 0 || cfg.batch < 2 {
            return Err(Error::InvalidArgument("chain needs width, layers >= 1 and batch >= 2".into()));
        }
        let mut params = ParamStore::new();
        let features = match &cfg.features {
            FeatureKind::MeanStd => ChainFeatures::MeanStd { d_x },
            FeatureKind::Learned(fc) => {
                if fc.d_x != d_x {
                    return Err(Error::InvalidArgument(format!("feature d_x {} != {d_x}", fc.d_x)));
                }
                ChainFeatures::Learned(FeatureMap::new(&mut params, rng, fc.clone()))
            }
        };
        let fdim = features.dim();
        let nets = (0..d)
            .map(|k| {
                let cond_dim = fdim + k;
                let mut dims = vec![1 + cond_dim];
                dims.extend(std::iter::repeat_n(cfg.width, cfg.hidden_layers));
                dims.push(1);
                PinballNet {
                    mlp: Mlp::new(&mut params, rng, &format!("net{k}"), &dims),
                    cond_dim,
                }
            })
            .collect();
        Ok(Self {
            d,
            d_x,
            ordering,
            params,
            nets,
            features,
            history: Vec::new(),
        })
    }

    /// Inference-mode conditioning features, one row per data set.
    pub fn features_batch(&self, xs: &[&DataMatrix]) -> Result<Tensor> {
        match &self.features {
            ChainFeatures::MeanStd { d_x } => {
                let rows: Vec<Vec<f64>> = xs
                    .iter()
                    .map(|x| {
                        if x.d_x() != *d_x {
                            return Err(Error::InvalidArgument(format!(
                                "data has {} rows, chain expects {d_x}",
                                x.d_x()
                            )));
                        }
                        Ok(mean_std(x))
                    })
                    .collect::<Result<_>>()?;
                Ok(Tensor::from_rows(&rows))
            }
            ChainFeatures::Learned(f) => {
                let mut g = Graph::new();
                let nodes = f.build(&mut g, xs, Mode::Inference)?.expect("q > 0");
                g.forward(&self.params, &[])?;
                Ok(g.value(nodes.centered).expect("evaluated").clone())
            }
        }
    }

    /// Network `k` evaluated on rows `(tau_i, cond_i)`.
    pub fn eval_net(&self, k: usize, taus: &[f64], cond: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let input = g.constant(net_input(taus, cond));
        self.nets[k].mlp.apply(&mut g, input);
        Ok(g.forward(&self.params, &[])?.data().to_vec())
    }

    /// Conditioning for network `k`: features followed by the chain values
    /// of coordinates `0..k` (in chain order).
    fn conditioning(feats: &Tensor, prev: &[Vec<f64>]) -> Tensor {
        let rows = feats.rows();
        let cols = feats.cols() + prev.len();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(feats.row_slice(i));
            data.extend(prev.iter().map(|c| c[i]));
        }
        Tensor::new(rows, cols, data)
    }

    /// Level `tau` at which network `k` reproduces each target, by bisection.
    fn match_levels(&self, k: usize, cond: &Tensor, targets: &[f64]) -> Result<Vec<f64>> {
        let n = targets.len();
        let mut lo = vec![TAU_EPS; n];
        let mut hi = vec![1.0 - TAU_EPS; n];
        for _ in 0..BISECTION_STEPS {
            let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            let q = self.eval_net(k, &mid, cond)?;
            for i in 0..n {
                if q[i] < targets[i] {
                    lo[i] = mid[i];
                } else {
                    hi[i] = mid[i];
                }
            }
        }
        Ok(lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    /// Draws with the given levels, `taus[i][k]` for network `k`; returned
    /// in natural parameter order.
    pub fn sample_with_levels(&self, x: &DataMatrix, taus: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = taus.len();
        let f = self.features_batch(&[x])?;
        let feats = Tensor::from_rows(&vec![f.row_slice(0); n]);
        let mut prev: Vec<Vec<f64>> = Vec::with_capacity(self.d);
        for k in 0..self.d {
            let cond = Self::conditioning(&feats, &prev);
            let level: Vec<f64> = taus.iter().map(|t| t[k]).collect();
            prev.push(self.eval_net(k, &level, &cond)?);
        }
        Ok((0..n)
            .map(|i| {
                let mut theta = vec![0.0; self.d];
                for (k, &p) in self.ordering.iter().enumerate() {
                    theta[p] = prev[k][i];
                }
                theta
            })
            .collect())
    }

    /// Fraction of random level pairs `tau < tau'` for which network `k` is
    /// nondecreasing, at the features of `x` and earlier coordinates drawn
    /// from the chain.
    pub fn monotone_fraction(&self, k: usize, x: &DataMatrix, pairs: usize, rng: &mut dyn RngCore) -> Result<f64> {
        let levels: Vec<Vec<f64>> = (0..pairs).map(|_| (0..self.d).map(|_| rng.random()).collect()).collect();
        let draws = self.sample_with_levels(x, &levels)?;
        let f = self.features_batch(&[x])?;
        let feats = Tensor::from_rows(&vec![f.row_slice(0); pairs]);
        let prev: Vec<Vec<f64>> = self.ordering[..k]
            .iter()
            .map(|&p| draws.iter().map(|t| t[p]).collect())
            .collect();
        let cond = Self::conditioning(&feats, &prev);
        let mut a: Vec<f64> = (0..pairs).map(|_| rng.random()).collect();
        let mut b: Vec<f64> = (0..pairs).map(|_| rng.random()).collect();
        for i in 0..pairs {
            if a[i] > b[i] {
                std::mem::swap(&mut a[i], &mut b[i]);
            }
        }
        let qa = self.eval_net(k, &a, &cond)?;
        let qb = self.eval_net(k, &b, &cond)?;
        Ok(qa.iter().zip(&qb).filter(|(x, y)| x <= y).count() as f64 / pairs.max(1) as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json(CHAIN_FORMAT, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        io::from_json(CHAIN_FORMAT, text)
    }
}

fn net_input(taus: &[f64], cond: &Tensor) -> Tensor {
    let cols = 1 + cond.cols();
    let mut data = Vec::with_capacity(taus.len() * cols);
    for (i, &t) in taus.iter().enumerate() {
        data.push(t);
        data.extend_from_slice(cond.row_slice(i));
    }
    Tensor::new(taus.len(), cols, data)
}

/// `N` draws: independent levels per coordinate pushed through the chain.
pub fn sample_autoregressive(chain: &AutoRegChain, x: &DataMatrix, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
    let taus: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..chain.d).map(|_| rng.random()).collect())
        .collect();
    chain.sample_with_levels(x, &taus)
}

/// Trains the chain network by network. While network `k` trains, each
/// earlier coordinate is replaced by the previous network's output at the
/// level that reproduces the simulated value, so conditioning values are
/// draws from the earlier samplers that stay coupled to the target.
pub fn train_autoregressive<S: Simulator + ?Sized>(cfg: &ChainConfig, sim: &S) -> Result<AutoRegChain> {
    let d = sim.theta_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chain = AutoRegChain::new(d, sim.d_x(), cfg, &mut rng)?;

    for k in 0..d {
        // Only network k (and, for k = 0, the learned features) moves.
        let mut trainable: Vec<bool> = vec![false; chain.params.len()];
        let net_ids = net_param_ids(&chain.nets[k]);
        for id in &net_ids {
            trainable[id.index()] = true;
        }
        let learn_features = k == 0 && matches!(chain.features, ChainFeatures::Learned(_));
        if learn_features {
            let fixed: std::collections::HashSet<usize> = chain
                .nets
                .iter()
                .flat_map(net_param_ids)
                .map(|id| id.index())
                .collect();
            for (i, t) in trainable.iter_mut().enumerate() {
                if !fixed.contains(&i) {
                    *t = true;
                }
            }
        }
        let mut adam = AdamState::new(&chain.params, cfg.schedule.at(0));
        let mut history = Vec::new();
        for epoch in 0..cfg.epochs {
            adam.lr = cfg.schedule.at(epoch);
            let mut sum = 0.0;
            for _ in 0..cfg.iters_per_epoch {
                let mut thetas = Vec::with_capacity(cfg.batch);
                let mut xs = Vec::with_capacity(cfg.batch);
                for _ in 0..cfg.batch {
                    let (t, x, _) = sim.simulate_pair(&mut rng)?;
                    thetas.push(t);
                    xs.push(x);
                }
                let xrefs: Vec<&DataMatrix> = xs.iter().collect();
                let targets: Vec<f64> = thetas.iter().map(|t| t[chain.ordering[k]]).collect();
                let taus: Vec<f64> = (0..cfg.batch).map(|_| rng.random()).collect();

                let mut g = Graph::new();
                let mut batch_mean = None;
                let feats_node;
                if learn_features {
                    let ChainFeatures::Learned(f) = &chain.features else { unreachable!() };
                    let nodes = f.build(&mut g, &xrefs, Mode::Training)?.expect("q > 0");
                    batch_mean = nodes.batch_mean;
                    feats_node = nodes.centered;
                } else {
                    let feats = chain.features_batch(&xrefs)?;
                    let prev = chain.matched_previous(k, &feats, &thetas)?;
                    let cond = AutoRegChain::conditioning(&feats, &prev);
                    feats_node = g.constant(cond);
                }
                let tau_node = g.constant(Tensor::column(&taus));
                let input = g.concat_cols(tau_node, feats_node);
                let q = chain.nets[k].mlp.apply(&mut g, input);
                let loss = pinball_graph(&mut g, q, &taus, &targets);
                let value = g.forward(&chain.params, &[])?.item();
                let mut grads = g.backward(loss, Wrt::Params)?.dense(&chain.params);
                for (i, gr) in grads.iter_mut().enumerate() {
                    if !trainable[i] {
                        gr.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                adam.step(&mut chain.params, &grads)?;
                if let Some(m) = batch_mean {
                    let m = g.value(m).expect("evaluated").clone();
                    if let ChainFeatures::Learned(f) = &mut chain.features {
                        f.update_running_mean(&m);
                    }
                }
                sum += value;
            }
            history.push(sum / cfg.iters_per_epoch.max(1) as f64);
        }
        if learn_features && cfg.epochs > 0 {
            let xs: Vec<DataMatrix> = (0..10 * cfg.batch)
                .map(|_| sim.simulate_pair(&mut rng).map(|p| p.1))
                .collect::<Result<_>>()?;
            let xrefs: Vec<&DataMatrix> = xs.iter().collect();
            if let ChainFeatures::Learned(f) = &mut chain.features {
                f.calibrate(&chain.params, &xrefs)?;
            }
        }
        chain.history.push(history);
    }
    if let ChainFeatures::Learned(f) = &mut chain.features {
        f.mode = Mode::Inference;
    }
    Ok(chain)
}

fn net_param_ids(net: &PinballNet) -> Vec<crate::autodiff::ParamId> {
    net.mlp.layers.iter().flat_map(|l| [l.w, l.b]).collect()
}

/// Mean of `2 (tau (z - q) + relu(q - z))` over the rows.
fn pinball_graph(g: &mut Graph, q: NodeId, taus: &[f64], targets: &[f64]) -> NodeId {
    let z = g.constant(Tensor::column(targets));
    let t = g.constant(Tensor::column(taus));
    let diff = g.sub(z, q);
    let lin = g.mul(diff, t);
    let neg = g.scale(diff, -1.0);
    let hinge = g.nonneg(neg);
    let per_row = g.add(lin, hinge);
    let mean = g.mean(per_row);
    g.scale(mean, 2.0)
}

impl AutoRegChain {
    /// Chain values of coordinates `0..k` rank-matched to the simulated
    /// `thetas`.
    fn matched_previous(&self, k: usize, feats: &Tensor, thetas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut prev: Vec<Vec<f64>> = Vec::with_capacity(k);
        for j in 0..k {
            let cond = Self::conditioning(feats, &prev);
            let targets: Vec<f64> = thetas.iter().map(|t| t[self.ordering[j]]).collect();
            let levels = self.match_levels(j, &cond, &targets)?;
            prev.push(self.eval_net(j, &levels, &cond)?);
        }
        Ok(prev)
    }
}
