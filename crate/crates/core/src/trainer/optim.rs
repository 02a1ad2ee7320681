use serde::{Deserialize, Serialize};

use crate::numerics::Scalar;

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(n: usize, lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: vec![T::zero(); n] }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for ((p, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub params: AdamParams,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, params: AdamParams) -> Self {
        Self { params, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [T], grads: &[T]) {
        self.t += 1;
        let p = self.params;
        let (b1, b2) = (T::of(p.beta1), T::of(p.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::of(p.lr), T::of(p.eps));
        for (((x, m), v), &g) in theta.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}
