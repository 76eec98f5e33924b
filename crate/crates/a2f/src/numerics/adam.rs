use std::collections::BTreeMap;

use super::{NumericsError, Tensor};

/// Adam hyperparameters. Training uses the constant default learning rate.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

/// Per-parameter Adam state keyed by parameter name.
///
/// Updates are routed: a parameter is only touched when the trainer hands its
/// gradient in, so parameters of inactive decoder heads stay bitwise
/// unchanged. An explicit all-zero gradient decays the moment buffers without
/// moving the parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, slots: BTreeMap::new() }
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot> {
        self.slots.get(name)
    }

    pub fn slots(&self) -> impl Iterator<Item = (&String, &AdamSlot)> {
        self.slots.iter()
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.slots.insert(name, slot);
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// Bias-corrected Adam update for one named parameter.
    pub fn step(
        &mut self,
        name: &str,
        param: &mut Tensor<f32>,
        grad: &[f32],
    ) -> Result<(), NumericsError> {
        if grad.len() != param.numel() {
            return Err(NumericsError::shape(
                "adam",
                format!("parameter `{name}`: {} values vs {} gradients", param.numel(), grad.len()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NumericsError::NonFiniteGrad(name.to_string()));
        }
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            step: 0,
        });
        let b1 = self.config.beta1 as f32;
        let b2 = self.config.beta2 as f32;
        slot.step += 1;
        if grad.iter().all(|&g| g == 0.0) {
            // Moments decay; the parameter does not move.
            slot.m.iter_mut().for_each(|m| *m *= b1);
            slot.v.iter_mut().for_each(|v| *v *= b2);
            return Ok(());
        }
        let t = slot.step as i32;
        let corr1 = 1.0 - self.config.beta1.powi(t);
        let corr2 = 1.0 - self.config.beta2.powi(t);
        let scale = (self.config.lr / corr1) as f32;
        let corr2_sqrt = corr2.sqrt() as f32;
        let eps = self.config.epsilon as f32;
        let data = param.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            slot.m[j] = b1 * slot.m[j] + (1.0 - b1) * g;
            slot.v[j] = b2 * slot.v[j] + (1.0 - b2) * g * g;
            data[j] -= scale * slot.m[j] / (slot.v[j].sqrt() / corr2_sqrt + eps);
        }
        Ok(())
    }
}
