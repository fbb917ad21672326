use serde::{Deserialize, Serialize};

use super::param::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: 1.0 }
    }
}

/// Adaptive-moment gradient descent over every trainable parameter of a
/// store. Gradients are read from (and then cleared in) the store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Self { config, v: m.clone(), m, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c = &self.config;
        let mut scale = 1.0;
        if c.clip_norm > 0.0 {
            let norm = store
                .iter()
                .filter(|p| p.trainable)
                .flat_map(|p| p.grad.data())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > c.clip_norm {
                scale = c.clip_norm / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grads = p.grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[j] * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        store.zero_grad();
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}
