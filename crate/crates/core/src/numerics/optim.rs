use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Self {
            config,
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has an entry in `grads`; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let n = p.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2], vec![0.5, -3.0]).unwrap());
        let mut adam = Adam::new(0.1, AdamConfig::default());
        adam.step(&mut params, &grads);
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut adam = Adam::new(0.1, AdamConfig::default());
        for _ in 0..500 {
            let x = params.get("x").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::new(vec![1], vec![2.0 * (x - 2.0)]).unwrap());
            adam.step(&mut params, &grads);
        }
        assert!((params.get("x").unwrap().data()[0] - 2.0).abs() < 1e-2);
    }
}
