use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(learning_rate: f32, weight_decay: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::adam(learning_rate)
        }
    }
}

/// Adam / AdamW with per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.requires_grad && p.grad.is_none()) {
            return Err(Error::State(format!("parameter `{}` has no gradient", p.name)));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t);
        self.moments.resize_with(store.len(), || None);
        for (p, slot) in store.iter_mut().zip(self.moments.iter_mut()) {
            let Some(g) = p.grad.take() else { continue };
            let (m, v) = slot.get_or_insert_with(|| {
                (
                    Tensor::zeros(p.value.shape().to_vec()),
                    Tensor::zeros(p.value.shape().to_vec()),
                )
            });
            let decay = match c.kind {
                OptimizerKind::AdamW => 1.0 - c.learning_rate * c.weight_decay,
                OptimizerKind::Adam => 1.0,
            };
            let w = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                w[i] *= decay;
                w[i] -= (c.learning_rate as f64 * mhat / (vhat.sqrt() + c.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}
