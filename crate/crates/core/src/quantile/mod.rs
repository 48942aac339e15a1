//! Posterior draws, credible sets, vector ranks and depth ordering.

mod hull;
mod rank;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use hull::{convex_hull_2d, Hull};
pub use rank::{mk_depth_order, vector_rank, vector_rank_with_features, RankOptions, RankResult};

use crate::autodiff::Tensor;
use crate::data::DataMatrix;
use crate::networks::PotentialModel;
use crate::simulators::{sample_direction, sample_source};
use crate::{io, Error, Result};

/// A conditional potential whose `u`-gradient is the quantile map.
pub trait QuantileMap {
    fn d(&self) -> usize;

    /// Conditioning features of `x`.
    fn features_of(&self, x: &DataMatrix) -> Result<Vec<f64>>;

    /// `psi(u_i, x)` for every row of `us`.
    fn psi_batch(&self, us: &Tensor, feats: &[f64]) -> Result<Vec<f64>>;

    /// `grad_u psi(u_i, x)` for every row of `us`.
    fn grad_batch(&self, us: &Tensor, feats: &[f64]) -> Result<Tensor>;
}

impl QuantileMap for PotentialModel {
    fn d(&self) -> usize {
        PotentialModel::d(self)
    }

    fn features_of(&self, x: &DataMatrix) -> Result<Vec<f64>> {
        PotentialModel::features_of(self, x)
    }

    fn psi_batch(&self, us: &Tensor, feats: &[f64]) -> Result<Vec<f64>> {
        self.psi_with_features(us, feats)
    }

    fn grad_batch(&self, us: &Tensor, feats: &[f64]) -> Result<Tensor> {
        self.grad_with_features(us, feats)
    }
}

/// `psi(u, x) = ||u||^2 / 2`, whose quantile map is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticPotential {
    pub d: usize,
}

impl QuantileMap for QuadraticPotential {
    fn d(&self) -> usize {
        self.d
    }

    fn features_of(&self, _x: &DataMatrix) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn psi_batch(&self, us: &Tensor, _feats: &[f64]) -> Result<Vec<f64>> {
        Ok((0..us.rows())
            .map(|i| 0.5 * us.row_slice(i).iter().map(|v| v * v).sum::<f64>())
            .collect())
    }

    fn grad_batch(&self, us: &Tensor, _feats: &[f64]) -> Result<Tensor> {
        Ok(us.clone())
    }
}

/// Posterior draws together with the source points that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSampleSet {
    pub x: DataMatrix,
    pub points: Vec<Vec<f64>>,
    pub sources: Vec<Vec<f64>>,
    pub tau_cap: f64,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

/// Pushes `count` source draws with radius at most `tau_cap`.
pub fn sample_capped<M: QuantileMap + ?Sized>(
    map: &M,
    x: &DataMatrix,
    count: usize,
    tau_cap: f64,
    rng: &mut dyn RngCore,
) -> Result<PosteriorSampleSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let feats = map.features_of(x)?;
    let src = sample_source(map.d(), count, tau_cap, rng)?;
    let us = Tensor::new(count, map.d(), src.into_iter().flat_map(|s| s.u).collect());
    let pts = map.grad_batch(&us, &feats)?;
    Ok(PosteriorSampleSet {
        x: x.clone(),
        points: rows(&pts),
        sources: rows(&us),
        tau_cap,
    })
}

/// `count` posterior draws `grad_u psi(U, x)` with `U` from the full source.
pub fn sample_posterior<M: QuantileMap + ?Sized>(
    map: &M,
    x: &DataMatrix,
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<PosteriorSampleSet> {
    sample_capped(map, x, count, 1.0, rng)
}

/// Hull of one coordinate pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairHull {
    pub pair: [usize; 2],
    pub hull: Hull,
}

/// All coordinate pairs `(i, j)`, `i < j`; a single `(0, 0)` pair for `d = 1`.
pub fn coordinate_pairs(d: usize) -> Vec<[usize; 2]> {
    if d == 1 {
        return vec![[0, 0]];
    }
    let mut out = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            out.push([i, j]);
        }
    }
    out
}

/// Per-pair hulls of a point cloud.
pub fn pairwise_hulls(points: &[Vec<f64>], d: usize) -> Vec<PairHull> {
    coordinate_pairs(d)
        .into_iter()
        .map(|pair| {
            let proj: Vec<[f64; 2]> = points.iter().map(|p| [p[pair[0]], p[pair[1]]]).collect();
            PairHull {
                pair,
                hull: convex_hull_2d(&proj),
            }
        })
        .collect()
}

/// Level-`tau` credible set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibleSet {
    pub tau: f64,
    pub points: Vec<Vec<f64>>,
    pub hulls: Vec<PairHull>,
}

impl CredibleSet {
    pub fn is_degenerate(&self) -> bool {
        self.hulls.iter().any(|h| h.hull.degenerate)
    }

    /// Whether `theta` lies in every pairwise hull.
    pub fn contains(&self, theta: &[f64], tol: f64) -> bool {
        self.hulls
            .iter()
            .all(|h| h.hull.contains([theta[h.pair[0]], theta[h.pair[1]]], tol))
    }

    /// Number of pairwise hulls containing `theta`.
    pub fn pairs_containing(&self, theta: &[f64], tol: f64) -> usize {
        self.hulls
            .iter()
            .filter(|h| h.hull.contains([theta[h.pair[0]], theta[h.pair[1]]], tol))
            .count()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1)")));
    }
    Ok(())
}

/// Credible set from `count` pushes of the radius-`tau` source ball.
pub fn sample_credible_set<M: QuantileMap + ?Sized>(
    map: &M,
    x: &DataMatrix,
    tau: f64,
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<CredibleSet> {
    check_tau(tau)?;
    let d = map.d();
    if count < d + 1 {
        return Err(Error::InvalidArgument(format!("need at least {} points, got {count}", d + 1)));
    }
    let s = sample_capped(map, x, count, tau, rng)?;
    let hulls = pairwise_hulls(&s.points, d);
    Ok(CredibleSet {
        tau,
        points: s.points,
        hulls,
    })
}

/// Shared unit directions for contour construction.
pub fn sample_directions<R: Rng + ?Sized>(d: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count).map(|_| sample_direction(d, rng)).collect()
}

/// Contour at each level: pushes of `tau * v` over the shared directions,
/// hulled per coordinate pair.
pub fn contour_sets<M: QuantileMap + ?Sized>(
    map: &M,
    x: &DataMatrix,
    taus: &[f64],
    directions: &[Vec<f64>],
) -> Result<Vec<CredibleSet>> {
    let feats = map.features_of(x)?;
    contour_sets_with_features(map, &feats, taus, directions)
}

pub fn contour_sets_with_features<M: QuantileMap + ?Sized>(
    map: &M,
    feats: &[f64],
    taus: &[f64],
    directions: &[Vec<f64>],
) -> Result<Vec<CredibleSet>> {
    let d = map.d();
    if directions.len() < d + 1 || directions.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument(format!(
            "need at least {} directions of dimension {d}",
            d + 1
        )));
    }
    taus.iter()
        .map(|&tau| {
            check_tau(tau)?;
            let us = Tensor::new(
                directions.len(),
                d,
                directions.iter().flat_map(|v| v.iter().map(move |c| tau * c)).collect(),
            );
            let points = rows(&map.grad_batch(&us, feats)?);
            let hulls = pairwise_hulls(&points, d);
            Ok(CredibleSet { tau, points, hulls })
        })
        .collect()
}

/// Pairs checked and violations of `[Q(u) - Q(u')]^T (u - u') >= -tol`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub pairs: usize,
    pub violations: usize,
    /// Most negative inner product seen (0 when none is negative).
    pub worst: f64,
}

impl MonotonicityReport {
    pub fn rate(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.violations as f64 / self.pairs as f64
        }
    }
}

pub fn monotonicity_check<M: QuantileMap + ?Sized>(
    map: &M,
    feats: &[f64],
    pairs: usize,
    tol: f64,
    rng: &mut dyn RngCore,
) -> Result<MonotonicityReport> {
    let d = map.d();
    let src = sample_source(d, 2 * pairs, 1.0, rng)?;
    let us = Tensor::new(2 * pairs, d, src.into_iter().flat_map(|s| s.u).collect());
    let q = map.grad_batch(&us, feats)?;
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for p in 0..pairs {
        let (a, b) = (2 * p, 2 * p + 1);
        let ip: f64 = (0..d)
            .map(|k| (q.get(a, k) - q.get(b, k)) * (us.get(a, k) - us.get(b, k)))
            .sum();
        if ip < -tol {
            violations += 1;
        }
        worst = worst.min(ip);
    }
    Ok(MonotonicityReport {
        pairs,
        violations,
        worst,
    })
}

/// CSV with header `theta1..theta_d`.
pub fn write_samples_csv<W: std::io::Write>(out: W, points: &[Vec<f64>], d: usize) -> Result<()> {
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidArgument(format!("sample rows must have {d} entries")));
    }
    io::write_matrix_csv(out, &io::numbered("theta", d), points)
}

/// One polygon of a hull export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullRecord {
    pub level: f64,
    pub pair: [usize; 2],
    pub vertices: Vec<[f64; 2]>,
    pub degenerate: bool,
}

pub fn hull_records(sets: &[CredibleSet]) -> Vec<HullRecord> {
    sets.iter()
        .flat_map(|s| {
            s.hulls.iter().map(|h| HullRecord {
                level: s.tau,
                pair: h.pair,
                vertices: h.hull.vertices.clone(),
                degenerate: h.hull.degenerate,
            })
        })
        .collect()
}

/// Pretty-printed JSON array of [`HullRecord`]s.
pub fn write_hulls_json<W: std::io::Write>(out: W, records: &[HullRecord]) -> Result<()> {
    serde_json::to_writer_pretty(out, records)?;
    Ok(())
}

pub fn read_hulls_json<R: std::io::Read>(input: R) -> Result<Vec<HullRecord>> {
    Ok(serde_json::from_reader(input)?)
}
