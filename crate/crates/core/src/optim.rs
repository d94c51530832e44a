//! Gradient descent with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Coefficient λ of the `λ‖θ‖²` penalty.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, store: &ParamStore) -> Self {
        let velocity = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self { config, velocity }
    }

    /// Applies one update. Parameters whose gradient is `None` did not take
    /// part in the forward pass and are left untouched, decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        let norm: f64 = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay: wd,
            ..
        } = self.config;
        for (id, grad) in store.ids().zip(grads) {
            let Some(grad) = grad else { continue };
            let vel = &mut self.velocity[id.index()];
            let param = store.get_mut(id);
            for ((v, p), gv) in vel.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
                let gtot = clip * gv + 2.0 * wd * *p;
                *v = momentum * *v + gtot;
                *p -= lr * *v;
            }
        }
    }
}

/// Adam; used only for fitting the frozen reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(learning_rate: f64, clip_norm: Option<f64>, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            learning_rate,
            clip_norm,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        let norm: f64 = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (id, grad) in store.ids().zip(grads) {
            let Some(grad) = grad else { continue };
            let i = id.index();
            let param = store.get_mut(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, p) in param.data_mut().iter_mut().enumerate() {
                let gk = clip * grad.data()[k];
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * gk;
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * gk * gk;
                *p -= self.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Sums per-sample gradient lists in order.
pub fn accumulate(total: &mut Vec<Option<Tensor>>, add: Vec<Option<Tensor>>) {
    if total.is_empty() {
        *total = add;
        return;
    }
    for (t, a) in total.iter_mut().zip(add) {
        match (t.as_mut(), a) {
            (Some(t), Some(a)) => t.add_assign(&a),
            (None, Some(a)) => *t = Some(a),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(2, 2, 0.5));
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            &store,
        );
        let before = store.fingerprint(&[id]);
        opt.step(&mut store, &[Some(Tensor::filled(2, 2, 3.0))]);
        assert_eq!(store.fingerprint(&[id]), before);
    }

    #[test]
    fn descends_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(4.0));
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                clip_norm: None,
            },
            &store,
        );
        for _ in 0..300 {
            let w = store.get(id).item();
            opt.step(&mut store, &[Some(Tensor::scalar(2.0 * w))]);
        }
        assert!(store.get(id).item().abs() < 1e-3);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, None, &store);
        for _ in 0..500 {
            let g = store.get(id).map(|w| 2.0 * w);
            opt.step(&mut store, &[Some(g)]);
        }
        assert!(store.get(id).data().iter().all(|w| w.abs() < 1e-2));
    }
}
