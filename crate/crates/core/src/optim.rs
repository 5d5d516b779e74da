//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.numel()];
        AdamState {
            config,
            step: 0,
            m: store.iter().map(|(_, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are treated as having
    /// a zero gradient, so their moments still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape("adam_step", &[store.len()], &[grads.len()]));
        }
        for id in store.ids() {
            if let Some(g) = &grads[id.index()] {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::shape("adam_step", store.get(id).shape(), g.shape()));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids() {
            let i = id.index();
            let param = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = grads[i].as_ref().map(Tensor::data);
            for j in 0..param.len() {
                let g = grad.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                param[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
