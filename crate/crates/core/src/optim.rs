//! AdamW with decoupled weight decay and a warmup + exponential decay
//! learning-rate schedule.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `lr(t) = peak · min(t / warmup, exp(−γ (t − warmup)))` for step `t ≥ 1`.
///
/// Desk-scale defaults are warmup 500 and peak 1e-3. The full-scale recipe
/// is warmup 40 000 and peak 0.025 (see [`LrSchedule::full_scale`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 1e-3,
            warmup: 500,
            decay: 1e-4,
        }
    }
}

impl LrSchedule {
    pub fn full_scale() -> Self {
        Self {
            peak: 0.025,
            warmup: 40_000,
            decay: 1e-5,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup as f64;
        let ramp = if self.warmup == 0 { 1.0 } else { t / w };
        let tail = Float::exp(-self.decay * (t - w).max(0.0));
        self.peak * ramp.min(tail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig, schedule: LrSchedule) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        Self {
            config,
            schedule,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.at(self.step + 1)
    }

    /// One update with `grads[i]` belonging to parameter `i` of `store`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::DimensionMismatch {
                expected: store.len(),
                got: grads.len(),
            });
        }
        let mut sq = 0.0f64;
        for ((_, p), g) in store.iter().zip(grads) {
            if g.shape() != p.value().shape() {
                return Err(Error::shape("adamw", alloc::format!("gradient for {}", p.name)));
            }
            for &x in g.data() {
                let x = x.as_f64();
                if !x.is_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
                sq += x * x;
            }
        }
        let norm = Float::sqrt(sq);
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let lr = self.schedule.at(self.step);
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = if store.param(id).kind.decays() {
                lr * c.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id);
            for (((w, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grads[k].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g * T::of(clip);
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = mi.as_f64() / bc1;
                let vhat = vi.as_f64() / bc2;
                let upd = w.as_f64() * (1.0 - decay) - lr * mhat / (Float::sqrt(vhat) + c.eps);
                *w = T::of(upd);
            }
        }
        Ok(lr)
    }
}
