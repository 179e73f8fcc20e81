//! Stochastic gradient descent with classical momentum over named
//! encoder parameters.

use std::collections::BTreeMap;

use crate::encoder::{EncoderParams, TapeParams};
use crate::error::{Error, Result};
use crate::tensor::{GradientMap, Tensor};

pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive and finite, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Update every parameter that was bound as trainable:
    /// v <- momentum * v + g, w <- w - lr * v. Velocity buffers are keyed
    /// by name and survive re-binding across steps.
    pub fn step(
        &mut self,
        params: &mut EncoderParams,
        bound: &TapeParams,
        grads: &GradientMap,
    ) -> Result<()> {
        for (name, traced) in bound.traced() {
            let g = grads.get(traced)?;
            let v = match self.velocity.get(name) {
                Some(prev) => prev.scale(self.momentum).add(&g)?,
                None => g,
            };
            let updated = params.value(name)?.sub(&v.scale(self.lr))?;
            if !updated.all_finite() {
                return Err(Error::numeric(
                    "sgd.step",
                    format!("parameter `{name}` became non-finite"),
                ));
            }
            params.set_value(name, updated)?;
            self.velocity.insert(name.to_string(), v);
        }
        Ok(())
    }
}
