//! The semi-dual objective and the simulate-as-you-go training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, LrSchedule, NodeId, Tensor, Wrt};
use crate::data::{DataMatrix, TrainingTriple};
use crate::networks::{Mode, ModelConfig, PotentialModel};
use crate::simulators::{simulate_batch, Simulator};
use crate::{Error, Result};

/// Consecutive non-finite iterations tolerated before training aborts.
pub const MAX_NON_FINITE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub restarts: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Held-out selection batch as a multiple of `batch`.
    pub heldout_factor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            iters_per_epoch: 100,
            batch: 128,
            restarts: 1,
            seed: 0,
            schedule: LrSchedule::default(),
            heldout_factor: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::InvalidArgument(format!("batch {} < 2", self.batch)));
        }
        if self.restarts < 1 || self.heldout_factor < 1 {
            return Err(Error::InvalidArgument("restarts and heldout_factor must be >= 1".into()));
        }
        if !(self.schedule.base > 0.0 && self.schedule.decay > 0.0) {
            return Err(Error::InvalidArgument(format!("learning-rate schedule {:?}", self.schedule)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub mean_loss: f64,
    pub lr: f64,
    /// Prior draws rejected for divergence during the epoch.
    pub rejected: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// CSV with columns `epoch,mean_loss,lr`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "mean_loss", "lr"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.mean_loss.to_string(), e.lr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct LossGraph {
    graph: Graph,
    loss: NodeId,
    scores: NodeId,
    batch_mean: Option<NodeId>,
}

/// `S[i, j] = U_j^T theta_i - phi(U_j) - b(U_j)^T f(X_i)` and
/// `mean_i [phi(U_i) + max_j S[i, j]]`.
fn build_loss(model: &PotentialModel, batch: &[TrainingTriple], mode: Mode) -> Result<LossGraph> {
    let nb = batch.len();
    if nb == 0 {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let d = model.d();
    for (i, t) in batch.iter().enumerate() {
        if t.theta.len() != d || t.u.len() != d {
            return Err(Error::InvalidArgument(format!(
                "triple {i}: theta/u dimension {}/{}, model has d = {d}",
                t.theta.len(),
                t.u.len()
            )));
        }
        crate::networks::check_source(&t.u)?;
    }
    let u = Tensor::from_rows(&batch.iter().map(|t| t.u.as_slice()).collect::<Vec<_>>());
    let theta = Tensor::from_rows(&batch.iter().map(|t| t.theta.as_slice()).collect::<Vec<_>>());
    let xs: Vec<&DataMatrix> = batch.iter().map(|t| &t.x).collect();

    let mut g = Graph::new();
    let tu = g.constant(theta.matmul(&u.transpose()));
    let un = g.constant(u);
    let phi = model.apply_phi(&mut g, un);
    let phi_row = g.transpose(phi);
    let mut scores = g.sub(tu, phi_row);
    let feats = model.features.build(&mut g, &xs, mode)?;
    let mut batch_mean = None;
    if let (Some(bu), Some(f)) = (model.apply_b(&mut g, un), feats) {
        let bt = g.transpose(bu);
        let fb = g.matmul(f.centered, bt);
        scores = g.sub(scores, fb);
        batch_mean = f.batch_mean;
    }
    let m = g.row_max(scores);
    let per_row = g.add(phi, m);
    let loss = g.mean(per_row);
    Ok(LossGraph {
        graph: g,
        loss,
        scores,
        batch_mean,
    })
}

fn forward_loss(model: &PotentialModel, lg: &mut LossGraph) -> Result<f64> {
    lg.graph.evaluate(&model.params, &[])?;
    let s = lg.graph.value(lg.scores).expect("evaluated");
    if let Some(k) = s.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore {
            row: k / s.cols(),
            col: k % s.cols(),
        });
    }
    let value = lg.graph.value(lg.loss).expect("evaluated").item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(value)
}

/// Value of the objective on `batch`; the model is not modified.
pub fn loss_l1(model: &PotentialModel, batch: &[TrainingTriple], mode: Mode) -> Result<f64> {
    let mut lg = build_loss(model, batch, mode)?;
    forward_loss(model, &mut lg)
}

/// Objective, dense parameter gradients and (in training mode) the feature
/// batch mean.
pub fn loss_and_gradients(
    model: &PotentialModel,
    batch: &[TrainingTriple],
    mode: Mode,
) -> Result<(f64, Vec<Tensor>, Option<Tensor>)> {
    let mut lg = build_loss(model, batch, mode)?;
    let value = forward_loss(model, &mut lg)?;
    let grads = lg.graph.backward(lg.loss, Wrt::Params)?.dense(&model.params);
    let mean = lg
        .batch_mean
        .map(|m| lg.graph.value(m).expect("evaluated").clone());
    Ok((value, grads, mean))
}

/// Plain double-loop evaluation of the objective, used as a reference.
pub fn loss_l1_reference(model: &PotentialModel, batch: &[TrainingTriple], feats: &[Vec<f64>]) -> Result<f64> {
    let nb = batch.len();
    let mut phi = Vec::with_capacity(nb);
    let mut b = Vec::with_capacity(nb);
    for t in batch {
        phi.push(model.phi_value(&t.u)?);
        b.push(model.b_value(&t.u)?);
    }
    let mut total = 0.0;
    for i in 0..nb {
        let mut best = f64::NEG_INFINITY;
        for j in 0..nb {
            let ut: f64 = batch[j].u.iter().zip(&batch[i].theta).map(|(a, b)| a * b).sum();
            let bf: f64 = b[j].iter().zip(&feats[i]).map(|(a, b)| a * b).sum();
            best = best.max(ut - phi[j] - bf);
        }
        total += phi[i] + best;
    }
    Ok(total / nb as f64)
}

/// Trained model and its per-epoch loss.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PotentialModel,
    pub history: LossHistory,
}

/// Replaces the running feature mean by the mean over `count` fresh data
/// sets at the current parameters.
fn calibrate_features<S: Simulator + ?Sized>(
    model: &mut PotentialModel,
    sim: &S,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let batch = simulate_batch(sim, count, rng)?;
    let xs: Vec<&DataMatrix> = batch.triples.iter().map(|t| &t.x).collect();
    model.features.calibrate(&model.params, &xs)
}

/// Runs the training loop with a fresh simulated batch and fresh source
/// draws at every iteration. `on_epoch` sees every finished epoch.
pub fn train_with<S: Simulator + ?Sized>(
    model_config: &ModelConfig,
    sim: &S,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord, &PotentialModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dims(model_config, sim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PotentialModel::new(model_config.clone(), &mut rng)?;
    model.set_mode(Mode::Training);
    let mut adam = AdamState::new(&model.params, cfg.schedule.at(0));
    let mut history = LossHistory::default();
    let mut bad_streak = 0usize;

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.schedule.at(epoch);
        let mut sum = 0.0;
        let mut counted = 0usize;
        let mut rejected = 0usize;
        for it in 0..cfg.iters_per_epoch {
            let batch = simulate_batch(sim, cfg.batch, &mut rng)?;
            rejected += batch.rejected;
            match loss_and_gradients(&model, &batch.triples, Mode::Training) {
                Ok((value, grads, mean)) => {
                    adam.step(&mut model.params, &grads)?;
                    if let Some(m) = mean {
                        model.features.update_running_mean(&m);
                    }
                    sum += value;
                    counted += 1;
                    bad_streak = 0;
                }
                Err(e @ (Error::NonFinite(_) | Error::NonFiniteScore { .. })) => {
                    bad_streak += 1;
                    if bad_streak >= MAX_NON_FINITE {
                        return Err(Error::TrainingAborted(format!(
                            "{bad_streak} consecutive non-finite losses (epoch {epoch}, iteration {it}): {e}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: if counted > 0 { sum / counted as f64 } else { f64::NAN },
            lr: adam.lr,
            rejected,
        };
        if epoch + 1 == cfg.epochs {
            calibrate_features(&mut model, sim, cfg.batch * cfg.heldout_factor, &mut rng)?;
        }
        on_epoch(&record, &model)?;
        history.epochs.push(record);
    }
    model.set_mode(Mode::Inference);
    Ok(TrainOutcome { model, history })
}

pub fn train<S: Simulator + ?Sized>(
    model_config: &ModelConfig,
    sim: &S,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with(model_config, sim, cfg, seed, &mut |_, _| Ok(()))
}

fn check_dims<S: Simulator + ?Sized>(model_config: &ModelConfig, sim: &S) -> Result<()> {
    if model_config.d != sim.theta_dim() || model_config.features.d_x != sim.d_x() {
        return Err(Error::InvalidArgument(format!(
            "model (d = {}, d_x = {}) does not fit simulator `{}` (d = {}, d_x = {})",
            model_config.d,
            model_config.features.d_x,
            sim.name(),
            sim.theta_dim(),
            sim.d_x()
        )));
    }
    Ok(())
}

/// Result of restart selection.
#[derive(Clone, Debug)]
pub struct RestartOutcome {
    pub model: PotentialModel,
    pub history: LossHistory,
    pub selected: usize,
    /// Held-out loss per restart; `None` for an aborted restart.
    pub heldout: Vec<Option<f64>>,
    pub seeds: Vec<u64>,
}

/// Seed of the held-out selection batch.
fn heldout_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_4e1d_0u64
}

/// Trains `cfg.restarts` models with seeds `seed, seed + 1, ...` and keeps
/// the one with the lowest objective on a shared held-out batch evaluated
/// with features centered on that batch.
pub fn multi_restart_train<S: Simulator + ?Sized>(
    model_config: &ModelConfig,
    sim: &S,
    cfg: &TrainConfig,
) -> Result<RestartOutcome> {
    multi_restart_train_with(model_config, sim, cfg, &mut |_, _, _| Ok(()))
}

pub fn multi_restart_train_with<S: Simulator + ?Sized>(
    model_config: &ModelConfig,
    sim: &S,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord, &PotentialModel) -> Result<()>,
) -> Result<RestartOutcome> {
    cfg.validate()?;
    check_dims(model_config, sim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(heldout_seed(cfg.seed));
    let heldout = simulate_batch(sim, cfg.batch * cfg.heldout_factor, &mut rng)?.triples;

    let mut best: Option<(f64, usize, TrainOutcome)> = None;
    let mut losses = Vec::with_capacity(cfg.restarts);
    let mut seeds = Vec::with_capacity(cfg.restarts);
    let mut last_err = None;
    for r in 0..cfg.restarts {
        let seed = cfg.seed.wrapping_add(r as u64);
        seeds.push(seed);
        let outcome = match train_with(model_config, sim, cfg, seed, &mut |rec, m| on_epoch(r, rec, m)) {
            Ok(o) => o,
            Err(e @ Error::TrainingAborted(_)) => {
                losses.push(None);
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let loss = loss_l1(&outcome.model, &heldout, Mode::Training).ok();
        losses.push(loss);
        if let Some(l) = loss {
            if best.as_ref().is_none_or(|(b, _, _)| l < *b) {
                best = Some((l, r, outcome));
            }
        }
    }
    match best {
        Some((_, selected, outcome)) => Ok(RestartOutcome {
            model: outcome.model,
            history: outcome.history,
            selected,
            heldout: losses,
            seeds,
        }),
        None => Err(Error::TrainingAborted(format!(
            "all {} restarts failed; last error: {}",
            cfg.restarts,
            last_err.map_or_else(|| "non-finite held-out loss".to_string(), |e| e.to_string())
        ))),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::networks::FeatureConfig;
    use crate::simulators::{GaussianConjugateConfig, GaussianSimulator};

    fn tiny(q1: usize) -> ModelConfig {
        ModelConfig {
            d: 2,
            icnn_width: 8,
            icnn_layers: 2,
            features: FeatureConfig {
                d_x: 1,
                q1,
                q2: 0,
                deepset_width: 8,
                deepset_latent: 4,
            },
        }
    }

    fn gaussian(n: usize) -> GaussianSimulator {
        GaussianSimulator::new(GaussianConjugateConfig::with_n(n)).unwrap()
    }

    fn batch(seed: u64, size: usize) -> Vec<TrainingTriple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        simulate_batch(&gaussian(3), size, &mut rng).unwrap().triples
    }

    fn training_features(model: &PotentialModel, batch: &[TrainingTriple]) -> Vec<Vec<f64>> {
        let mut f = model.features.clone();
        let xs: Vec<&DataMatrix> = batch.iter().map(|t| &t.x).collect();
        let t = f.forward(&model.params, &xs, Mode::Training).unwrap();
        (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
    }

    #[test]
    fn matches_double_loop_reference() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = PotentialModel::new(tiny(3), &mut rng).unwrap();
            let b = batch(100 + seed, 8);
            let f = training_features(&model, &b);
            let fast = loss_l1(&model, &b, Mode::Training).unwrap();
            let slow = loss_l1_reference(&model, &b, &f).unwrap();
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn single_triple_cancels_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = PotentialModel::new(tiny(2), &mut rng).unwrap();
        model.features.running_mean = vec![0.3, -0.2];
        let b = batch(2, 1);
        let t = &b[0];
        let f = model.features_of(&t.x).unwrap();
        let bu = model.b_value(&t.u).unwrap();
        let expect = t.u.iter().zip(&t.theta).map(|(a, b)| a * b).sum::<f64>()
            - bu.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
        let got = loss_l1(&model, &b, Mode::Inference).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_network_loss_is_mean_max_of_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = PotentialModel::new(tiny(2), &mut rng).unwrap();
        model.params.set_all(0.0);
        let b = batch(4, 10);
        let expect = b
            .iter()
            .map(|ti| {
                b.iter()
                    .map(|tj| tj.u.iter().zip(&ti.theta).map(|(a, b)| a * b).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / b.len() as f64;
        assert!((loss_l1(&model, &b, Mode::Training).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_are_finite_and_invariant_to_phi_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = PotentialModel::new(tiny(2), &mut rng).unwrap();
        let mut shifted = model.clone();
        shifted.shift_phi(-4.0);
        let b = batch(6, 16);
        let (la, ga, _) = loss_and_gradients(&model, &b, Mode::Training).unwrap();
        let (lb, gb, _) = loss_and_gradients(&shifted, &b, Mode::Training).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!(x.is_finite());
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = PotentialModel::new(tiny(2), &mut rng).unwrap();
        let b = batch(8, 6);
        let (_, grads, _) = loss_and_gradients(&model, &b, Mode::Training).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (k, id) in model.params.ids().enumerate() {
            for idx in [0, model.params.get(id).len() - 1] {
                let mut up = model.clone();
                up.params.get_mut(id).data_mut()[idx] += h;
                let mut dn = model.clone();
                dn.params.get_mut(id).data_mut()[idx] -= h;
                let fd = (loss_l1(&up, &b, Mode::Training).unwrap() - loss_l1(&dn, &b, Mode::Training).unwrap())
                    / (2.0 * h);
                let an = grads[k].data()[idx];
                // Argmax switches make the objective piecewise smooth; skip kinks.
                if (fd - an).abs() > 1e-4 * fd.abs().max(an.abs()).max(1e-2) {
                    continue;
                }
                checked += 1;
            }
        }
        assert!(checked >= model.params.len());
    }

    #[test]
    fn non_finite_score_is_located() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = PotentialModel::new(tiny(0), &mut rng).unwrap();
        let mut b = batch(10, 4);
        b[2].theta[0] = f64::INFINITY;
        let err = loss_l1(&model, &b, Mode::Training).unwrap_err();
        assert!(matches!(err, Error::NonFiniteScore { row: 2, .. }), "{err:?}");
    }

    #[test]
    fn zero_iterations_return_the_initial_model() {
        let cfg = TrainConfig {
            epochs: 0,
            seed: 11,
            ..Default::default()
        };
        let out = train(&tiny(2), &gaussian(2), &cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init = PotentialModel::new(tiny(2), &mut rng).unwrap();
        assert_eq!(out.model.params, init.params);
        assert_eq!(out.model.features.running_mean, init.features.running_mean);
        assert!(out.history.epochs.is_empty());
        assert_eq!(out.model.mode(), Mode::Inference);
    }

    fn short_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            iters_per_epoch: 20,
            batch: 32,
            restarts: 1,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_skip_weights_nonnegative() {
        let cfg = short_cfg(12);
        let mut snapshots = Vec::new();
        let a = train_with(&tiny(2), &gaussian(2), &cfg, 12, &mut |rec, m| {
            snapshots.push(rec.epoch);
            for id in m.phi.wz.iter().chain(&m.b.as_ref().unwrap().wz) {
                assert!(m.params.get(*id).data().iter().all(|&w| w >= 0.0));
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(snapshots, vec![1, 2, 3]);
        let b = train(&tiny(2), &gaussian(2), &cfg, 12).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        let lr: Vec<f64> = a.history.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lr, vec![0.01, 0.01 * 0.99, 0.01 * 0.99f64.powi(2)]);
    }

    #[test]
    fn single_restart_equals_train() {
        let cfg = short_cfg(13);
        let single = train(&tiny(2), &gaussian(2), &cfg, 13).unwrap();
        let multi = multi_restart_train(&tiny(2), &gaussian(2), &cfg).unwrap();
        assert_eq!(multi.selected, 0);
        assert_eq!(multi.model, single.model);
    }

    #[test]
    fn restart_selection_picks_lowest_heldout_loss() {
        let cfg = TrainConfig {
            restarts: 3,
            ..short_cfg(14)
        };
        let out = multi_restart_train(&tiny(2), &gaussian(2), &cfg).unwrap();
        assert_eq!(out.seeds, vec![14, 15, 16]);
        let chosen = out.heldout[out.selected].unwrap();
        assert!(out.heldout.iter().all(|l| chosen <= l.unwrap()));
    }

    #[test]
    fn rejects_mismatched_simulator_and_bad_config() {
        let mut cfg = short_cfg(0);
        let wrong = ModelConfig { d: 4, ..tiny(2) };
        assert!(train(&wrong, &gaussian(2), &cfg, 0).is_err());
        cfg.batch = 1;
        assert!(train(&tiny(2), &gaussian(2), &cfg, 0).is_err());
    }

    #[test]
    fn history_csv() {
        let h = LossHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                mean_loss: 0.5,
                lr: 0.01,
                rejected: 0,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss,lr\n1,0.5,0.01\n");
    }
}
