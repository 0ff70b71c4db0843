//! Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates for every entry of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| {
                if store.is_trainable(id) {
                    vec![0.0; store.get(id).len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self {
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam step over the given gradients.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer tracks {} entries, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(*id);
            p.expect_same_shape(g)?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// `lr0·½(1 + cos(π·step/(total−1)))`; equals `lr0` at step 0 and 0 at the last step.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let s = step.min(total - 1) as f64 / (total - 1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 100), 2e-4);
        assert!(cosine_lr(2e-4, 99, 100) <= 2e-6);
        assert_abs_diff_eq!(cosine_lr(1.0, 50, 101), 0.5, epsilon = 1e-12);
        assert_eq!(cosine_lr(1.0, 0, 1), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        store.add_buffer("buf", Tensor::zeros(&[3]));
        let mut adam = AdamState::new(&store);
        let g = Tensor::new(vec![2], vec![0.5, -3.0]).unwrap();
        adam.step(&mut store, &[(id, g)], 0.1, &AdamConfig::default()).unwrap();
        assert_abs_diff_eq!(store.get(id).data()[0], 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(store.get(id).data()[1], -0.9, epsilon = 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut adam = AdamState::new(&store);
        for _ in 0..2000 {
            let w = store.get(id).data()[0];
            let g = Tensor::new(vec![1], vec![2.0 * (w - 3.0)]).unwrap();
            adam.step(&mut store, &[(id, g)], 0.01, &AdamConfig::default()).unwrap();
        }
        assert_abs_diff_eq!(store.get(id).data()[0], 3.0, epsilon = 1e-3);
    }
}
