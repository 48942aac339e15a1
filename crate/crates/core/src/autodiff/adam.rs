use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::{Error, Result};

/// Bias-corrected Adam state for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Defaults `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .shapes()
            .into_iter()
            .map(|[r, c]| Tensor::zeros(r, c))
            .collect();
        Self {
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter. Nonnegative-constrained tensors are
    /// projected after the step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient shape {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);

        for (k, id) in params.ids().enumerate().collect::<Vec<_>>() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.project();
        Ok(())
    }
}

/// Exponential learning-rate decay applied once per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.01,
            decay: 0.99,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: u32) -> f64 {
        self.base * self.decay.powi(epoch as i32)
    }
}

/// Learning rate for `epoch` under the default schedule `0.01 * 0.99^epoch`.
pub fn lr_schedule(epoch: u32) -> f64 {
    LrSchedule::default().at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(values));
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(&[0.5, -2.0, 3.0]);
        let mut adam = AdamState::new(&p, 0.01);
        adam.eps = 0.0;
        adam.step(&mut p, &[Tensor::full(1, 3, 1.0)]).unwrap();
        let moved: Vec<f64> = p.get(super::super::ParamId(0)).data().to_vec();
        for (after, before) in moved.iter().zip([0.5, -2.0, 3.0]) {
            assert!((after - (before - 0.01)).abs() < 1e-15);
        }
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = store(&[0.25, 7.0]);
        let before = p.clone();
        let mut adam = AdamState::new(&p, 0.01);
        for _ in 0..5 {
            adam.step(&mut p, &[Tensor::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn matches_standalone_scalar_adam() {
        // f(w) = (w - 5)^2, oracle written independently of AdamState.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=20 {
            let g = 2.0 * (w - 5.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            oracle.push(w);
        }

        let mut p = store(&[0.0]);
        let id = p.ids().next().unwrap();
        let mut adam = AdamState::new(&p, lr);
        for expect in oracle {
            let w = p.get(id).data()[0];
            adam.step(&mut p, &[Tensor::scalar(2.0 * (w - 5.0))]).unwrap();
            assert!((p.get(id).data()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[1.0]);
        let mut adam = AdamState::new(&p, 0.01);
        let err = adam.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn nonneg_parameters_are_clamped_after_step() {
        let mut p = ParamStore::new();
        let id = p.add_nonneg("wz", Tensor::row(&[0.001, 0.5]));
        let mut adam = AdamState::new(&p, 0.01);
        adam.step(&mut p, &[Tensor::row(&[1.0, 1.0])]).unwrap();
        assert_eq!(p.get(id).data()[0], 0.0);
        assert!((p.get(id).data()[1] - 0.49).abs() < 1e-9);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0), 0.01);
        assert!((lr_schedule(1) - 0.0099).abs() < 1e-18);
        let iterated = (0..150).fold(0.01, |lr, _| lr * 0.99);
        assert!((lr_schedule(150) - iterated).abs() < 1e-15);
    }
}
