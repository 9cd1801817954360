use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};

/// Adam with optional global gradient-norm clipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    state: Vec<AdamSlot>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AdamSlot {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            state: Vec::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    /// Global L2 norm of the gradients of `ids`.
    pub fn grad_norm(store: &ParamStore, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| store.get(*id).grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Updates exactly the parameters in `ids`, skipping frozen ones. Bias
    /// correction is tracked per parameter, so a parameter that sits out a
    /// phase resumes with its own step count.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> f64 {
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), AdamSlot::default);
        }
        let norm = Self::grad_norm(store, ids);
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for &id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let slot = &mut self.state[id.index()];
            let p = store.get_mut(id);
            if slot.m.len() != p.grad.len() {
                slot.m = vec![0.0; p.grad.len()];
                slot.v = vec![0.0; p.grad.len()];
            }
            slot.step += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let g = p.grad[j] * scale;
                slot.m[j] = self.beta1 * slot.m[j] + (1.0 - self.beta1) * g;
                slot.v[j] = self.beta2 * slot.v[j] + (1.0 - self.beta2) * g * g;
                let mhat = slot.m[j] / bc1;
                let vhat = slot.v[j] / bc2;
                values[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}
