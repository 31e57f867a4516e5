use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moments per parameter plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self, index: usize) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(index)?
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW step over every trainable parameter: bias-corrected Adam on
/// the gradient plus decoupled weight decay `p -= lr * wd * p`.
///
/// Every trainable parameter must carry a gradient.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.tensor.grad().is_none()) {
        return Err(NnError::MissingGrad(p.name.clone()));
    }
    state.moments.resize_with(store.len(), || None);
    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let param = store.get_mut(id);
        if !param.trainable {
            continue;
        }
        let n = param.tensor.numel();
        let (m, v) = state.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = param.tensor.grad().expect("checked above").to_vec();
        let data = param.tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * weight_decay * data[i];
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
