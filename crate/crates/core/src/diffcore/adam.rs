use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam with bias correction. Moments are laid out like the store it was
/// created for.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    scales: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<_> = store.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        Self {
            config,
            step: 0,
            scales: vec![1.0; m.len()],
            v: m.clone(),
            m,
        }
    }

    /// Multiplies the learning rate of every parameter whose name starts
    /// with `prefix` by `scale`.
    pub fn set_lr_scale(&mut self, store: &ParamStore, prefix: &str, scale: f64) {
        for (p, s) in store.iter().zip(&mut self.scales) {
            if p.name.starts_with(prefix) {
                *s = scale;
            }
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), DiffError> {
        if store.len() != self.m.len() {
            return Err(DiffError::Shape {
                what: "adam parameter count",
                expected: self.m.len(),
                got: store.len(),
            });
        }
        for (p, m) in store.iter().zip(&self.m) {
            if p.value.dim() != m.dim() {
                return Err(DiffError::Shape {
                    what: "adam moment shape",
                    expected: m.len(),
                    got: p.value.len(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, m), v), &scale) in store.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(&self.scales) {
            let lr = lr * scale;
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(m)
                .and(v)
                .for_each(|x, g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * *g;
                    *v = beta2 * *v + (1.0 - beta2) * *g * *g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *x -= lr * mh / (vh.sqrt() + eps);
                    *g = 0.0;
                });
        }
        Ok(())
    }
}
