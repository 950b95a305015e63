//! AdamW, global-norm clipping and the warmup-cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Moment estimates for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update with decoupled weight decay:
    /// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
    /// A zero learning rate leaves every parameter bit-identical.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps, lr_t) = (T::one(), T::from_f64(c.eps), T::from_f64(lr));
        let decay = T::from_f64(lr * c.weight_decay);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw", g.shape(), p.value.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                if p.decay {
                    *w = *w - decay * *w;
                }
                *w -= lr_t * update;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_frac: f64,
    pub floor_frac: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: u64) -> Self {
        Self {
            peak,
            warmup_frac: 0.05,
            floor_frac: 0.1,
            total_steps,
        }
    }

    /// Linear ramp over the warmup, then a half cosine from `peak` down to
    /// `floor_frac * peak` at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps as f64;
        let warm = self.warmup_frac * total;
        let t = (step as f64).min(total);
        if t < warm {
            return self.peak * t / warm;
        }
        let floor = self.floor_frac * self.peak;
        let span = total - warm;
        if span <= 0.0 {
            return self.peak;
        }
        let progress = (t - warm) / span;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
