//! Adam with linear warm-up and cosine learning-rate decay.

use crate::scalar::Scalar;
use crate::slotcore::{Gradients, ModelParams};
use crate::tensor::Tensor;

/// Learning rate at a global step: linear warm-up, then cosine decay from
/// `base` to `base·floor` at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
    pub floor: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.base * (self.floor + (1.0 - self.floor) * cos)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::lit(lr / c1);
        let c2 = T::lit(c2);
        let eps = T::lit(self.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                *x -= step * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
    }

    /// Moments as two parameter sets named like `params`, for checkpoints.
    pub fn to_params(&self, like: &ModelParams<T>) -> (ModelParams<T>, ModelParams<T>) {
        let pack = |ts: &[Tensor<T>]| {
            let mut p = ModelParams::new();
            for (name, t) in like.names().iter().zip(ts) {
                p.insert(name, t.clone());
            }
            p
        };
        (pack(&self.m), pack(&self.v))
    }

    pub fn from_params(m: &ModelParams<T>, v: &ModelParams<T>, t: u64) -> Self {
        Self {
            t,
            m: m.tensors().to_vec(),
            v: v.tensors().to_vec(),
            ..Self::new(m)
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}
