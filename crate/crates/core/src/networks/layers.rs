use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Affine layer `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = fan_in_bound(fan_in);
        let w = store.add(format!("{name}.w"), uniform(rng, fan_in, fan_out, bound));
        let b = store.add(format!("{name}.b"), uniform(rng, 1, fan_out, bound));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }
}

/// Feedforward CELU network with a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense::new(store, rng, &format!("{name}.{l}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, h);
            if l + 1 < self.layers.len() {
                h = g.celu(h);
            }
        }
        h
    }
}

/// Input-convex network.
///
/// `z_1 = celu(u A_0 + c_0)`, `z_{k+1} = celu(z_k W_k + u A_k + c_k)` and
/// output `z_L W_L + u A_L + c_L`. The skip weights `W_k` are stored as
/// nonnegative parameters, which together with the convex nondecreasing
/// activation makes every output coordinate convex in `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Icnn {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    /// Pass-through weights from `u`, one per hidden layer plus the output.
    pub wu: Vec<ParamId>,
    /// Nonnegative weights between consecutive hidden layers and into the output.
    pub wz: Vec<ParamId>,
    pub bias: Vec<ParamId>,
}

impl Icnn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input_dim: usize,
        width: usize,
        hidden_layers: usize,
        output_dim: usize,
    ) -> Self {
        assert!(hidden_layers >= 1, "an ICNN needs at least one hidden layer");
        let bu = fan_in_bound(input_dim);
        let bz = fan_in_bound(width);
        let mut wu = Vec::new();
        let mut wz = Vec::new();
        let mut bias = Vec::new();
        for k in 0..=hidden_layers {
            let out = if k == hidden_layers { output_dim } else { width };
            wu.push(store.add(format!("{name}.wu{k}"), uniform(rng, input_dim, out, bu)));
            if k > 0 {
                let w = uniform(rng, width, out, bz).map(f64::abs);
                wz.push(store.add_nonneg(format!("{name}.wz{k}"), w));
            }
            let bb = if k == 0 { bu } else { bz };
            bias.push(store.add(format!("{name}.b{k}"), uniform(rng, 1, out, bb)));
        }
        Self {
            input_dim,
            output_dim,
            width,
            wu,
            wz,
            bias,
        }
    }

    pub fn hidden_layers(&self) -> usize {
        self.wz.len()
    }

    pub fn apply(&self, g: &mut Graph, u: NodeId) -> NodeId {
        let last = self.hidden_layers();
        let mut z: Option<NodeId> = None;
        for k in 0..=last {
            let a = g.param(self.wu[k]);
            let c = g.param(self.bias[k]);
            let mut pre = g.matmul(u, a);
            if let Some(zk) = z {
                let w = g.param(self.wz[k - 1]);
                let zw = g.matmul(zk, w);
                pre = g.add(zw, pre);
            }
            pre = g.add(pre, c);
            z = Some(if k == last { pre } else { g.celu(pre) });
        }
        z.expect("at least one layer")
    }
}

/// Permutation-invariant summary `rho(sum_j enc(x_j))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepSet {
    pub encoder: Mlp,
    pub post: Mlp,
    pub output_dim: usize,
}

impl DeepSet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_x: usize,
        width: usize,
        latent: usize,
        output_dim: usize,
    ) -> Self {
        Self {
            encoder: Mlp::new(store, rng, "deepset.enc", &[d_x, width, latent]),
            post: Mlp::new(store, rng, "deepset.post", &[latent, width, output_dim]),
            output_dim,
        }
    }

    /// `obs` holds all observations as rows, `n` consecutive rows per set.
    pub fn apply(&self, g: &mut Graph, obs: NodeId, n: usize) -> NodeId {
        let e = self.encoder.apply(g, obs);
        let pooled = g.group_sum(e, n);
        self.post.apply(g, pooled)
    }
}

/// Single-layer LSTM whose summary is the final hidden state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub hidden: usize,
    /// Input weights for the stacked gates `[i, f, g, o]`.
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_x: usize, hidden: usize) -> Self {
        let bound = fan_in_bound(hidden);
        Self {
            hidden,
            wx: store.add("lstm.wx", uniform(rng, d_x, 4 * hidden, bound)),
            wh: store.add("lstm.wh", uniform(rng, hidden, 4 * hidden, bound)),
            bias: store.add("lstm.b", uniform(rng, 1, 4 * hidden, bound)),
        }
    }

    /// Runs over the steps `xs` (each `b x d_x`) and returns `h_T` (`b x hidden`).
    pub fn apply(&self, g: &mut Graph, xs: &[NodeId]) -> NodeId {
        let h_dim = self.hidden;
        let wx = g.param(self.wx);
        let wh = g.param(self.wh);
        let bias = g.param(self.bias);
        let mut state: Option<(NodeId, NodeId)> = None;
        for &x in xs {
            let mut gates = g.matmul(x, wx);
            if let Some((h, _)) = state {
                let hh = g.matmul(h, wh);
                gates = g.add(gates, hh);
            }
            gates = g.add(gates, bias);
            let i = g.slice_cols(gates, 0, h_dim);
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h_dim, 2 * h_dim);
            let f = g.sigmoid(f);
            let cand = g.slice_cols(gates, 2 * h_dim, 3 * h_dim);
            let cand = g.tanh(cand);
            let o = g.slice_cols(gates, 3 * h_dim, 4 * h_dim);
            let o = g.sigmoid(o);
            let ic = g.mul(i, cand);
            let c = match state {
                Some((_, c_prev)) => {
                    let fc = g.mul(f, c_prev);
                    g.add(fc, ic)
                }
                None => ic,
            };
            let tc = g.tanh(c);
            let h = g.mul(o, tc);
            state = Some((h, c));
        }
        state.expect("at least one step").0
    }
}
