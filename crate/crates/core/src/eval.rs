//! Comparison metrics: kernel MMD with a permutation null, distance to
//! measure, credible-set coverage, hull areas and 1-D Wasserstein distance.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::baselines::{sample_autoregressive, AutoRegChain};
use crate::data::DataMatrix;
use crate::networks::PotentialModel;
use crate::quantile::{contour_sets_with_features, sample_directions, sample_posterior, Hull, QuantileMap};
use crate::simulators::Simulator;
use crate::{Error, Result};

/// Anything that produces posterior draws for a data set.
pub trait PosteriorSampler {
    fn theta_dim(&self) -> usize;
    fn sample(&self, x: &DataMatrix, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>>;
}

impl PosteriorSampler for PotentialModel {
    fn theta_dim(&self) -> usize {
        self.d()
    }

    fn sample(&self, x: &DataMatrix, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        Ok(sample_posterior(self, x, count, rng)?.points)
    }
}

impl PosteriorSampler for AutoRegChain {
    fn theta_dim(&self) -> usize {
        self.d
    }

    fn sample(&self, x: &DataMatrix, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        sample_autoregressive(self, x, count, rng)
    }
}

/// Exact posterior of a simulator that has one.
pub struct OracleSampler<'a, S: ?Sized>(pub &'a S);

impl<S: Simulator + ?Sized> PosteriorSampler for OracleSampler<'_, S> {
    fn theta_dim(&self) -> usize {
        self.0.theta_dim()
    }

    fn sample(&self, x: &DataMatrix, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        let oracle = self
            .0
            .oracle(x)
            .ok_or_else(|| Error::NoOracle(self.0.name().to_string()))??;
        Ok(oracle.sample_n(count, rng))
    }
}

/// The prior, ignoring the data.
pub struct PriorSampler<'a, S: ?Sized>(pub &'a S);

impl<S: Simulator + ?Sized> PosteriorSampler for PriorSampler<'_, S> {
    fn theta_dim(&self) -> usize {
        self.0.theta_dim()
    }

    fn sample(&self, _x: &DataMatrix, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        Ok((0..count)
            .map(|_| self.0.observed_theta(&self.0.sample_prior(rng)))
            .collect())
    }
}

fn check_samples(name: &str, s: &[Vec<f64>], min: usize) -> Result<usize> {
    if s.len() < min {
        return Err(Error::InvalidArgument(format!("{name} needs at least {min} rows, got {}", s.len())));
    }
    let d = s[0].len();
    if s.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument(format!("{name} rows have unequal length")));
    }
    if s.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// RBF bandwidth from the median pairwise distance of a pooled sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub value: f64,
    /// The median was zero and the bandwidth fell back to 1.
    pub fallback: bool,
}

pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> Bandwidth {
    let pool: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut dists = Vec::with_capacity(pool.len() * pool.len().saturating_sub(1) / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            dists.push(sq_dist(pool[i], pool[j]));
        }
    }
    if dists.is_empty() {
        return Bandwidth { value: 1.0, fallback: true };
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let med = m.sqrt();
    if med > 0.0 && med.is_finite() {
        Bandwidth { value: med, fallback: false }
    } else {
        Bandwidth { value: 1.0, fallback: true }
    }
}

/// Pooled Gram matrix; rows `0..m` come from the first sample.
struct Gram {
    m: usize,
    k: Vec<f64>,
    size: usize,
}

impl Gram {
    fn new(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> Self {
        let pool: Vec<&Vec<f64>> = a.iter().chain(b).collect();
        let size = pool.len();
        let mut k = vec![0.0; size * size];
        let inv = 1.0 / (2.0 * h * h);
        for i in 0..size {
            k[i * size + i] = 1.0;
            for j in i + 1..size {
                let v = (-sq_dist(pool[i], pool[j]) * inv).exp();
                k[i * size + j] = v;
                k[j * size + i] = v;
            }
        }
        Self { m: a.len(), k, size }
    }

    /// Unbiased MMD^2 for the split given by `idx[..m]` and `idx[m..]`.
    fn mmd(&self, idx: &[usize]) -> f64 {
        let (xs, ys) = idx.split_at(self.m);
        let within = |s: &[usize]| {
            let mut t = 0.0;
            for (p, &i) in s.iter().enumerate() {
                for &j in &s[p + 1..] {
                    t += self.k[i * self.size + j];
                }
            }
            2.0 * t / (s.len() * (s.len() - 1)) as f64
        };
        let mut cross = 0.0;
        for &i in xs {
            for &j in ys {
                cross += self.k[i * self.size + j];
            }
        }
        within(xs) + within(ys) - 2.0 * cross / (xs.len() * ys.len()) as f64
    }
}

fn sample_order(a: &[Vec<f64>], b: &[Vec<f64>]) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Unbiased squared MMD with RBF kernel `exp(-|a - b|^2 / (2 h^2))`.
pub fn mmd_with_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> Result<f64> {
    let da = check_samples("first sample", a, 2)?;
    let db = check_samples("second sample", b, 2)?;
    if da != db {
        return Err(Error::InvalidArgument(format!("sample dimensions {da} and {db} differ")));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth {h} must be positive")));
    }
    // Canonical argument order.
    let (a, b) = if sample_order(a, b).is_gt() { (b, a) } else { (a, b) };
    let inv = 1.0 / (2.0 * h * h);
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) * inv).exp();
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                t += k(&s[i], &s[j]);
            }
        }
        2.0 * t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64)
}

/// Squared MMD with the median-heuristic bandwidth of the pooled sample.
/// The value is signed.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    Ok(mmd_detailed(a, b)?.0)
}

pub fn mmd_detailed(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, Bandwidth)> {
    check_samples("first sample", a, 2)?;
    check_samples("second sample", b, 2)?;
    let h = median_bandwidth(a, b);
    Ok((mmd_with_bandwidth(a, b, h.value)?, h))
}

/// MMD values over random relabellings of the pooled sample, at a fixed
/// bandwidth.
pub fn permutation_null(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    h: f64,
    permutations: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    mmd_with_bandwidth(&a[..2.min(a.len())], &b[..2.min(b.len())], h)?;
    let gram = Gram::new(a, b, h);
    let mut idx: Vec<usize> = (0..gram.size).collect();
    Ok((0..permutations)
        .map(|_| {
            idx.shuffle(rng);
            gram.mmd(&idx)
        })
        .collect())
}

/// Empirical `q`-quantile (`ceil(q n)`-th order statistic).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// Two-sample check of `samples` against reference draws, calibrated by the
/// permutation null of two independent reference halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdTest {
    pub statistic: f64,
    pub threshold: f64,
    pub bandwidth: Bandwidth,
    pub permutations: usize,
    pub level: f64,
    pub passed: bool,
}

pub fn mmd_null_test(
    samples: &[Vec<f64>],
    reference_a: &[Vec<f64>],
    reference_b: &[Vec<f64>],
    permutations: usize,
    level: f64,
    rng: &mut dyn RngCore,
) -> Result<MmdTest> {
    if permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let (statistic, bandwidth) = mmd_detailed(samples, reference_a)?;
    let null = permutation_null(reference_a, reference_b, bandwidth.value, permutations, rng)?;
    let threshold = percentile(&null, level);
    Ok(MmdTest {
        statistic,
        threshold,
        bandwidth,
        permutations,
        level,
        passed: statistic < threshold,
    })
}

/// Per draw of the distance-to-measure computation.
#[derive(Clone, Debug, PartialEq)]
pub struct DtmDraw {
    pub theta_star: Vec<f64>,
    pub x: DataMatrix,
    /// Mean over posterior draws and coordinates of `|theta* - theta|`.
    pub deviation: f64,
}

/// Mean absolute deviation between `J` prior draws and `I` posterior draws
/// conditioned on data simulated from each.
pub fn dtm<P: PosteriorSampler + ?Sized, S: Simulator + ?Sized>(
    sampler: &P,
    sim: &S,
    j: usize,
    i: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let draws = dtm_draws(sampler, sim, j, i, rng)?;
    Ok(draws.iter().map(|d| d.deviation).sum::<f64>() / j as f64)
}

pub fn dtm_draws<P: PosteriorSampler + ?Sized, S: Simulator + ?Sized>(
    sampler: &P,
    sim: &S,
    j: usize,
    i: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<DtmDraw>> {
    if j == 0 || i == 0 {
        return Err(Error::InvalidArgument("J and I must be >= 1".into()));
    }
    if sampler.theta_dim() != sim.theta_dim() {
        return Err(Error::InvalidArgument(format!(
            "sampler has {} coordinates, simulator {}",
            sampler.theta_dim(),
            sim.theta_dim()
        )));
    }
    (0..j)
        .map(|_| {
            let (theta_star, x, _) = sim.simulate_pair(rng)?;
            let post = sampler.sample(&x, i, rng)?;
            let total: f64 = post
                .iter()
                .map(|t| t.iter().zip(&theta_star).map(|(a, b)| (a - b).abs()).sum::<f64>())
                .sum();
            Ok(DtmDraw {
                deviation: total / (i * theta_star.len()) as f64,
                theta_star,
                x,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub tau: f64,
    pub fraction: f64,
    pub n_set: usize,
    pub n_test: usize,
    pub degenerate: bool,
}

/// Fraction of full-posterior draws inside the level-`tau` contour hulls
/// (every coordinate-pair hull), built from `n_set` shared directions.
pub fn coverage<M: QuantileMap + ?Sized>(
    map: &M,
    x: &DataMatrix,
    tau: f64,
    n_set: usize,
    n_test: usize,
    rng: &mut dyn RngCore,
) -> Result<CoverageReport> {
    Ok(coverage_levels(map, x, &[tau], n_set, n_test, rng)?.remove(0))
}

/// Coverage at several levels sharing one direction set and one test sample.
pub fn coverage_levels<M: QuantileMap + ?Sized>(
    map: &M,
    x: &DataMatrix,
    taus: &[f64],
    n_set: usize,
    n_test: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<CoverageReport>> {
    if n_test == 0 {
        return Err(Error::InvalidArgument("n_test must be >= 1".into()));
    }
    let feats = map.features_of(x)?;
    let dirs = sample_directions(map.d(), n_set, rng);
    let sets = contour_sets_with_features(map, &feats, taus, &dirs)?;
    let test = sample_posterior(map, x, n_test, rng)?;
    Ok(sets
        .iter()
        .map(|s| CoverageReport {
            tau: s.tau,
            fraction: test.points.iter().filter(|p| s.contains(p, 0.0)).count() as f64 / n_test as f64,
            n_set,
            n_test,
            degenerate: s.is_degenerate(),
        })
        .collect())
}

/// Shoelace area and the degeneracy flag.
pub fn hull_area(h: &Hull) -> (f64, bool) {
    (h.area(), h.degenerate)
}

/// 1-D Wasserstein-2 distance between equal-size samples by sorted pairing.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "w2_1d needs equal nonempty samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let ms = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(ms.sqrt())
}

/// One evaluation, serialized as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub sample_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, sample_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {metric}")));
        }
        Ok(Self {
            metric: metric.to_string(),
            value,
            sample_sizes,
            meta: BTreeMap::new(),
            seed,
        })
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }
}

pub fn write_reports_jsonl<W: std::io::Write>(mut out: W, reports: &[MetricReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports_jsonl(text: &str) -> Result<Vec<MetricReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::quantile::QuadraticPotential;
    use crate::simulators::{GaussianConjugateConfig, GaussianSimulator};

    fn normal_sample(rng: &mut ChaCha8Rng, mean: f64, n: usize) -> Vec<Vec<f64>> {
        let nd = Normal::new(mean, 1.0).unwrap();
        (0..n).map(|_| vec![nd.sample(rng)]).collect()
    }

    #[test]
    fn mmd_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = normal_sample(&mut rng, 0.0, 150);
        let b = normal_sample(&mut rng, 0.5, 90);
        assert_eq!(mmd(&a, &b).unwrap(), mmd(&b, &a).unwrap());
    }

    #[test]
    fn gram_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = normal_sample(&mut rng, 0.0, 40);
        let b = normal_sample(&mut rng, 1.0, 30);
        let g = Gram::new(&a, &b, 0.7);
        let idx: Vec<usize> = (0..70).collect();
        assert!((g.mmd(&idx) - mmd_with_bandwidth(&a, &b, 0.7).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn far_point_masses() {
        let a = vec![vec![0.0, 0.0]; 5];
        let b = vec![vec![1e6, 0.0]; 5];
        // The median pairwise distance of the pool is 1e6, so fix the kernel scale.
        let v = mmd_with_bandwidth(&a, &b, 1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let (v, h) = mmd_detailed(&a, &b).unwrap();
        assert!(!h.fallback);
        assert!(v > 0.0);
    }

    #[test]
    fn identical_pool_uses_fallback_bandwidth() {
        let a = vec![vec![3.0]; 4];
        let h = median_bandwidth(&a, &a);
        assert!(h.fallback);
        assert_eq!(h.value, 1.0);
        assert_eq!(mmd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn shifted_normals_exceed_the_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = normal_sample(&mut rng, 0.0, 1000);
        let b = normal_sample(&mut rng, 3.0, 1000);
        let (stat, h) = mmd_detailed(&a, &b).unwrap();
        let null = permutation_null(&a, &b, h.value, 100, &mut rng).unwrap();
        assert!(stat > percentile(&null, 0.99));
    }

    #[test]
    fn same_distribution_sits_in_the_null_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = normal_sample(&mut rng, 0.0, 300);
        let b = normal_sample(&mut rng, 0.0, 300);
        let c = normal_sample(&mut rng, 0.0, 300);
        let t = mmd_null_test(&a, &b, &c, 200, 0.99, &mut rng).unwrap();
        assert!(t.passed, "{t:?}");
    }

    #[test]
    fn percentile_order_statistic() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 100.0);
    }

    /// Data equal to the parameter, so a sampler can read theta* off `x`.
    struct Revealing;

    impl Simulator for Revealing {
        fn name(&self) -> &str {
            "revealing"
        }
        fn theta_dim(&self) -> usize {
            2
        }
        fn d_x(&self) -> usize {
            2
        }
        fn n(&self) -> usize {
            1
        }
        fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
            vec![rng.random(), rng.random()]
        }
        fn simulate(&self, latent: &[f64], _rng: &mut dyn RngCore) -> Result<DataMatrix> {
            Ok(DataMatrix::from_observations(2, latent.to_vec()).unwrap())
        }
    }

    struct Offset(f64);

    impl PosteriorSampler for Offset {
        fn theta_dim(&self) -> usize {
            2
        }
        fn sample(&self, x: &DataMatrix, count: usize, _rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
            Ok(vec![x.observation(0).iter().map(|v| v + self.0).collect(); count])
        }
    }

    #[test]
    fn dtm_exact_and_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(dtm(&Offset(0.0), &Revealing, 100, 300, &mut rng).unwrap(), 0.0);
        let v = dtm(&Offset(1.0), &Revealing, 100, 300, &mut rng).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(dtm(&Offset(0.0), &Revealing, 0, 3, &mut rng).is_err());
    }

    /// `E|a - theta|` per coordinate under the oracle by grid quadrature.
    fn quadrature_deviation(o: &crate::simulators::PosteriorOracle, a: &[f64]) -> f64 {
        let s_mu = (o.sigma2_n / o.kappa_n).sqrt();
        let (mu_lo, mu_hi) = (o.mu_n - 10.0 * s_mu, o.mu_n + 10.0 * s_mu);
        let (s_lo, s_hi) = (0.1 * o.sigma2_n, 5.0 * o.sigma2_n);
        let m = 500;
        let (dm, ds) = ((mu_hi - mu_lo) / m as f64, (s_hi - s_lo) / m as f64);
        let mut logs = Vec::with_capacity(m * m);
        for i in 0..m {
            for k in 0..m {
                let mu = mu_lo + (i as f64 + 0.5) * dm;
                let s2 = s_lo + (k as f64 + 0.5) * ds;
                logs.push((mu, s2, o.log_density(mu, s2)));
            }
        }
        let top = logs.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut e) = (0.0, 0.0);
        for (mu, s2, l) in logs {
            let w = (l - top).exp();
            z += w;
            e += w * 0.5 * ((a[0] - mu).abs() + (a[1] - s2).abs());
        }
        e / z
    }

    #[test]
    fn oracle_dtm_matches_quadrature() {
        let sim = GaussianSimulator::new(GaussianConjugateConfig::with_n(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = dtm_draws(&OracleSampler(&sim), &sim, 20, 2000, &mut rng).unwrap();
        for d in &draws {
            let o = sim.oracle(&d.x).unwrap().unwrap();
            let q = quadrature_deviation(&o, &d.theta_star);
            // Posterior spreads are O(0.2-0.5); 2000 draws give a few 1e-3 of noise.
            assert!((d.deviation - q).abs() < 0.02, "{} vs {q}", d.deviation);
        }
        let mc: f64 = draws.iter().map(|d| d.deviation).sum::<f64>() / 20.0;
        let quad: f64 = draws
            .iter()
            .map(|d| quadrature_deviation(&sim.oracle(&d.x).unwrap().unwrap(), &d.theta_star))
            .sum::<f64>()
            / 20.0;
        assert!((mc - quad).abs() < 0.01);
    }

    #[test]
    fn oracle_beats_prior_mean_sampler() {
        struct PriorMean;
        impl PosteriorSampler for PriorMean {
            fn theta_dim(&self) -> usize {
                2
            }
            fn sample(&self, _x: &DataMatrix, count: usize, _rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
                Ok(vec![vec![0.0, 25.0 / 23.0]; count])
            }
        }
        let sim = GaussianSimulator::new(GaussianConjugateConfig::with_n(32)).unwrap();
        let a = dtm(&OracleSampler(&sim), &sim, 100, 300, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = dtm(&PriorMean, &sim, 100, 300, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(a < b, "{a} vs {b}");
        let p = dtm(&PriorSampler(&sim), &sim, 100, 300, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(a < p);
    }

    #[test]
    fn identity_map_coverage_is_binomial() {
        let map = QuadraticPotential { d: 2 };
        let x = DataMatrix::replicated(0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n_test = 20_000;
        let reps = coverage_levels(&map, &x, &[0.5, 0.9, 0.99], 2000, n_test, &mut rng).unwrap();
        for r in &reps {
            let sd = (r.tau * (1.0 - r.tau) / n_test as f64).sqrt();
            // The 2000-gon inscribed in the circle loses O(1e-6) of area.
            assert!((r.fraction - r.tau).abs() < 3.0 * sd + 1e-3, "{r:?}");
            assert!(!r.degenerate);
        }
        assert!(reps[0].fraction < reps[1].fraction && reps[1].fraction < reps[2].fraction);
    }

    #[test]
    fn w2_closed_forms() {
        let a = [0.3, -1.0, 2.5];
        assert_eq!(w2_1d(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.75).collect();
        assert!((w2_1d(&a, &b).unwrap() - 0.75).abs() < 1e-15);
        assert!(w2_1d(&a, &b[..2]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u: Vec<f64> = (0..100_000).map(|_| rng.random()).collect();
        let v: Vec<f64> = (0..100_000).map(|_| 2.0 * rng.random::<f64>()).collect();
        assert!((w2_1d(&u, &v).unwrap() - 1.0 / 3f64.sqrt()).abs() < 0.01);
    }

    #[test]
    fn hull_area_flags() {
        use crate::quantile::convex_hull_2d;
        let h = convex_hull_2d(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(hull_area(&h), (0.5, false));
        assert_eq!(hull_area(&convex_hull_2d(&[[0.0, 0.0], [1.0, 1.0]])), (0.0, true));
    }

    #[test]
    fn reports_round_trip_as_json_lines() {
        let r = vec![
            MetricReport::new("mmd", -0.001, vec![2000, 2000], 7)
                .unwrap()
                .with("bandwidth", 0.42)
                .with("kernel", "rbf"),
            MetricReport::new("dtm", 0.3, vec![100, 300], 7).unwrap().with("J", 100),
        ];
        let mut buf = Vec::new();
        write_reports_jsonl(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_reports_jsonl(&text).unwrap(), r);
        assert!(MetricReport::new("x", f64::NAN, vec![], 0).is_err());
    }
}
