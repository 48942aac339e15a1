use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::QuantileMap;
use crate::autodiff::Tensor;
use crate::data::{norm, DataMatrix};
use crate::simulators::source_tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOptions {
    /// Random source draws used to pick the starting point.
    pub starts: usize,
    pub max_iter: usize,
    /// Convergence threshold on the step length.
    pub tol: f64,
    pub seed: u64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            starts: 256,
            max_iter: 1000,
            tol: 1e-10,
            seed: 0,
        }
    }
}

/// Maximizer of `u -> theta^T u - psi(u, x)` over the unit ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub theta: Vec<f64>,
    pub u: Vec<f64>,
    /// `1 - ||u||`.
    pub depth: f64,
    pub objective: f64,
    pub converged: bool,
    /// Objective after the initial pick and after every accepted step.
    pub trace: Vec<f64>,
}

fn project(u: &mut [f64]) {
    let r = norm(u);
    if r > 1.0 {
        u.iter_mut().for_each(|c| *c /= r);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Vector rank of `theta` given precomputed features of `x`.
pub fn vector_rank_with_features<M: QuantileMap + ?Sized>(
    map: &M,
    feats: &[f64],
    theta: &[f64],
    opts: &RankOptions,
) -> Result<RankResult> {
    let d = map.d();
    if theta.len() != d {
        return Err(Error::InvalidArgument(format!("theta has {} entries, expected {d}", theta.len())));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("theta".into()));
    }
    let objective = |u: &[f64]| -> Result<f64> {
        Ok(dot(theta, u) - map.psi_batch(&Tensor::row(u), feats)?[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cands = source_tensor(d, opts.starts.max(1), 1.0, &mut rng)?;
    let psi = map.psi_batch(&cands, feats)?;
    let (mut best_k, mut best) = (0, f64::NEG_INFINITY);
    for k in 0..cands.rows() {
        let v = dot(theta, cands.row_slice(k)) - psi[k];
        if v > best {
            best = v;
            best_k = k;
        }
    }
    let mut u = cands.row_slice(best_k).to_vec();
    let mut val = best;
    let mut trace = vec![val];
    let mut step = 1.0;
    let mut converged = false;

    for _ in 0..opts.max_iter {
        let grad = map.grad_batch(&Tensor::row(&u), feats)?;
        let g: Vec<f64> = theta.iter().zip(grad.data()).map(|(t, q)| t - q).collect();
        let mut accepted = None;
        let mut eta = step;
        while eta > 1e-14 {
            let mut cand: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a + eta * b).collect();
            project(&mut cand);
            let cv = objective(&cand)?;
            let moved: Vec<f64> = cand.iter().zip(&u).map(|(a, b)| a - b).collect();
            // Sufficient increase for the projected step.
            if cv >= val + 1e-4 * dot(&g, &moved) && cv >= val {
                accepted = Some((cand, cv, norm(&moved)));
                break;
            }
            eta *= 0.5;
        }
        match accepted {
            Some((cand, cv, moved)) => {
                u = cand;
                val = cv;
                trace.push(val);
                step = (eta * 2.0).min(1.0);
                if moved < opts.tol {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    Ok(RankResult {
        theta: theta.to_vec(),
        depth: 1.0 - norm(&u),
        u,
        objective: val,
        converged,
        trace,
    })
}

pub fn vector_rank<M: QuantileMap + ?Sized>(
    map: &M,
    x: &DataMatrix,
    theta: &[f64],
    opts: &RankOptions,
) -> Result<RankResult> {
    vector_rank_with_features(map, &map.features_of(x)?, theta, opts)
}

/// Indices of `thetas` sorted by depth, deepest first; ties keep input order.
pub fn mk_depth_order<M: QuantileMap + ?Sized>(
    map: &M,
    x: &DataMatrix,
    thetas: &[Vec<f64>],
    opts: &RankOptions,
) -> Result<Vec<usize>> {
    let feats = map.features_of(x)?;
    let depths = thetas
        .iter()
        .map(|t| vector_rank_with_features(map, &feats, t, opts).map(|r| r.depth))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..thetas.len()).collect();
    order.sort_by(|&a, &b| depths[b].total_cmp(&depths[a]));
    Ok(order)
}
