//! Optimizers, learning-rate schedule, early stopping and the mixup
//! coefficient sampler.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Heavy-ball SGD: `v ← μ v + g`, `p ← p − lr · v`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumSgd<T> {
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> MomentumSgd<T> {
    /// One zeroed velocity buffer per slot of the given lengths.
    pub fn new(momentum: f64, sizes: &[usize]) -> Self {
        Self {
            momentum,
            velocity: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn update(&mut self, slot: usize, lr: f64, param: &mut [T], grad: &[T]) {
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        let v = &mut self.velocity[slot];
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) -> Result<()> {
        let ok = velocity.len() == self.velocity.len()
            && velocity.iter().zip(&self.velocity).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::IncompatibleCheckpoint("optimizer state does not match the model".into()));
        }
        self.velocity = velocity;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Advances the step counter; call once before the slot updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, lr: f64, param: &mut [T], grad: &[T]) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        let step = T::from_f64(lr / c1);
        let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
        let inv_c2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(self.eps);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(self.m[slot].iter_mut())
            .zip(self.v[slot].iter_mut())
        {
            *m = tb1 * *m + (T::one() - tb1) * g;
            *v = tb2 * *v + (T::one() - tb2) * g * g;
            *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
}

/// `lr0 · (1 + cos(π t / T)) / 2`.
pub fn cosine_lr(lr0: f64, t: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return lr0;
    }
    let frac = (t.min(horizon)) as f64 / horizon as f64;
    lr0 * (1.0 + libm::cos(core::f64::consts::PI * frac)) / 2.0
}

/// Outcome of one early-stopping observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stale,
    Stop,
}

/// Stops after `patience` consecutive epochs without a new minimum that beats
/// the best by more than `min_rel_delta · |best|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_rel_delta: f64,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_rel_delta: 1e-5,
            best: None,
            best_epoch: 0,
            stale_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        let improved = match self.best {
            None => true,
            Some(b) => b - loss > self.min_rel_delta * b.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.best_epoch = epoch;
            self.stale_epochs = 0;
            Verdict::Improved
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Stale
            }
        }
    }
}

/// One draw of the mixup coefficient from `Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidAlpha(alpha));
    }
    let d = Beta::new(alpha, alpha).map_err(|_| Error::InvalidAlpha(alpha))?;
    Ok(d.sample(rng))
}
