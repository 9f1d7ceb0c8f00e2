use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    Adam,
    /// Decoupled weight decay with a linear learning-rate warm-up.
    AdamwWithWarmup { warmup_steps: u64, weight_decay: f64 },
}

/// Adam / AdamW over a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            kind,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
            params,
        }
    }

    pub fn adam(lr: f64, store: &ParamStore, params: Vec<ParamId>) -> Self {
        Self::new(OptimizerKind::Adam, lr, store, params)
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Learning rate that the next call to [`OptimizerState::step`] applies.
    pub fn effective_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Adam => self.lr,
            OptimizerKind::AdamwWithWarmup { warmup_steps, .. } => {
                let t = self.step + 1;
                if warmup_steps == 0 || t >= warmup_steps {
                    self.lr
                } else {
                    self.lr * t as f64 / warmup_steps as f64
                }
            }
        }
    }

    /// Applies one update using the gradients held in `store`. Gradients
    /// are left in place; the caller resets them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            if store.get(id).grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter `{}` has no gradient",
                    store.name(id)
                )));
            }
        }
        let lr = self.effective_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = match self.kind {
            OptimizerKind::Adam => 0.0,
            OptimizerKind::AdamwWithWarmup { weight_decay, .. } => weight_decay,
        };
        for (k, &id) in self.params.iter().enumerate() {
            let tensor = store.get_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *p);
            }
        }
        Ok(())
    }

    /// Moment buffers, aligned with [`OptimizerState::params`].
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let ok = |xs: &[Vec<f64>]| {
            xs.len() == self.m.len() && xs.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::Format("optimizer moment shapes do not match parameters".into()));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}
