//! Adam with decoupled weight decay.

use super::{Grads, NumError, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Grads,
    v: Grads,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: Grads::zeros_like(store),
            v: Grads::zeros_like(store),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter with a shared learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, cfg: &AdamConfig) -> Result<(), NumError> {
        self.step_with_lr(store, grads, cfg, |_| cfg.lr)
    }

    /// One update where `lr_of` picks the learning rate per parameter.
    ///
    /// Weight decay is applied to the parameter itself, `θ ← θ − lr·wd·θ`,
    /// before the bias-corrected Adam step.
    pub fn step_with_lr(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        cfg: &AdamConfig,
        lr_of: impl Fn(ParamId) -> f64,
    ) -> Result<(), NumError> {
        if !(cfg.eps > 0.0) {
            return Err(NumError::Argument(format!("adam eps must be positive, got {}", cfg.eps)));
        }
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(NumError::Argument(format!(
                "adam: {} parameters, {} gradients, {} moment buffers",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for id in store.ids() {
            if store.get(id).shape() != grads.get(id).shape() || store.get(id).shape() != self.m.get(id).shape() {
                return Err(NumError::Argument(format!(
                    "adam: shape mismatch for {}: {:?} vs gradient {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    grads.get(id).shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for id in store.ids() {
            let lr = lr_of(id);
            let g = grads.get(id).values();
            let m = self.m.get_mut(id).values_mut();
            let v = self.v.get_mut(id).values_mut();
            let p = store.get_mut(id).values_mut();
            for i in 0..p.len() {
                p[i] -= lr * cfg.weight_decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
