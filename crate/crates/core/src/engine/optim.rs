use serde::{Deserialize, Serialize};

use crate::nn::{flatten, Parameters};
use crate::real::Real;

/// Adam with bias correction; moments stored flat in parameter visiting order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(parameters: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; parameters],
            v: vec![0.0; parameters],
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update<T: Real, M: Parameters<T>>(&mut self, params: &mut M, grads: &M, lr: f64) {
        let g = flatten(grads);
        assert_eq!(g.len(), self.m.len(), "optimizer state does not match the model");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            for w in p.iter_mut() {
                let gi = g[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *w = T::from_f64_lossy(w.as_f64() - upd);
                i += 1;
            }
        });
    }
}
