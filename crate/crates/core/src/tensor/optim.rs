use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Element, Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone)]
pub struct AdamSlot<E: Element> {
    pub m: Vec<E>,
    pub v: Vec<E>,
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<E: Element> {
    pub config: AdamConfig,
    pub step: u64,
    pub slots: BTreeMap<String, AdamSlot<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &Gradients<E>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = |v: f64| E::from_f64_lossy(v);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = c(self.config.learning_rate);
        let eps = c(self.config.eps);

        let mut updates = Vec::new();
        for (name, p) in params.iter() {
            let Some(g) = grads.get(p) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![E::zero(); p.numel()],
                v: vec![E::zero(); p.numel()],
            });
            let mut next = p.to_vec();
            for (((w, &gi), m), v) in next.iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                *m = c(b1) * *m + c(1.0 - b1) * gi;
                *v = c(b2) * *v + c(1.0 - b2) * gi * gi;
                let m_hat = *m / c(bc1);
                let v_hat = *v / c(bc2);
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps));
            }
            updates.push((name.clone(), next));
        }
        for (name, data) in updates {
            params.set_data(&name, data)?;
        }
        Ok(())
    }
}
