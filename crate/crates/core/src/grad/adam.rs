use super::{mismatch, GradError, Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate once per `decay_interval` steps.
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.9,
            decay_interval: 20_000,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Learning rate used by the update after `completed` steps.
    pub fn lr_after(&self, completed: u64) -> f64 {
        let periods = completed / self.decay_interval.max(1);
        self.lr * self.decay_factor.powi(periods.min(i32::MAX as u64) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_after(self.step)
    }

    /// One bias-corrected update; `grads` is in parameter-store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), GradError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(mismatch(
                "adam",
                format!("{} params, {} grads, {} moments", store.len(), grads.len(), self.m.len()),
            ));
        }
        for ((id, _, p), g) in store.iter().zip(grads) {
            if p.shape() != g.shape() || self.m[id.0].shape() != p.shape() {
                return Err(mismatch(
                    "adam",
                    format!("{}: param {:?}, grad {:?}", store.name(id), p.shape(), g.shape()),
                ));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let id = super::ParamId(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for (((pj, mj), vj), gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Update from graph gradients; parameters absent from the graph get zero gradient.
    pub fn step_from(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), GradError> {
        let dense: Vec<Tensor> = store.ids().map(|id| grads.param_or_zeros(id, store)).collect();
        self.step(store, &dense)
    }
}
