use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Option<Tensor>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Option<Tensor>>) {
        self.velocity = velocity;
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let trainable: Vec<_> = params.trainable().collect();
        if self.velocity.is_empty() {
            self.velocity = vec![None; trainable.len()];
        }
        if self.velocity.len() != trainable.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        for (slot, entry) in self.velocity.iter_mut().zip(trainable) {
            let Some(g) = grads.get(entry.var.as_tensor()) else {
                continue;
            };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g = (g + (entry.var.as_tensor() * self.weight_decay)?)?;
            }
            let v = match slot.take() {
                Some(v) => ((v * self.momentum)? + g)?,
                None => g,
            };
            let updated = (entry.var.as_tensor() - (&v * lr)?)?;
            entry.var.set(&updated)?;
            *slot = Some(v.detach());
        }
        Ok(())
    }
}
