use serde::{Deserialize, Serialize};

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are kept per parameter array.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub params: AdamParams,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: AdamParams, shapes: &[usize]) -> Self {
        Adam {
            params,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Vec<T>>, grads: &[Vec<T>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for other params");
        self.step += 1;
        let p = self.params;
        let (b1, b2) = (T::of(p.beta1), T::of(p.beta2));
        let c1 = 1.0 - p.beta1.powi(self.step as i32);
        let c2 = 1.0 - p.beta2.powi(self.step as i32);
        let lr_t = T::of(p.lr * c2.sqrt() / c1);
        let eps_t = T::of(p.eps * c2.sqrt());
        for (((w, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..w.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                w[i] = w[i] - lr_t * m[i] / (v[i].sqrt() + eps_t);
            }
        }
    }
}
