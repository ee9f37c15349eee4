//! Gradient-descent update rule.

use crate::error::{Error, Result};
use crate::params::{ParamKey, ParamStore};
use crate::tensor::Scalar;

/// Stochastic gradient descent with classical momentum and L2 weight decay
/// folded into the gradient:
///
/// ```text
/// v <- momentum * v + (g + weight_decay * theta)
/// theta <- theta - learning_rate * v
/// ```
///
/// Velocity buffers are allocated once, aligned with the store's trainable
/// entries in registration order, so checkpoints can address them by
/// parameter name.
pub struct Sgd<S: Scalar = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    keys: Vec<ParamKey>,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(
        store: &ParamStore<S>,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Self {
        let keys = store.trainable_keys();
        let velocity =
            keys.iter().map(|&k| vec![S::zero(); store.tensor(k).numel()]).collect();
        Sgd { learning_rate, momentum, weight_decay, keys, velocity }
    }

    /// Apply one update from the gradients accumulated in the store.
    /// Parameters whose gradient buffer was never touched are left alone.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        let lr = S::from_f64(self.learning_rate);
        let mu = S::from_f64(self.momentum);
        let wd = S::from_f64(self.weight_decay);
        for (&key, vel) in self.keys.iter().zip(&mut self.velocity) {
            let param = store.tensor_mut(key);
            if param.numel() != vel.len() {
                return Err(Error::usage(format!(
                    "velocity buffer holds {} scalars but parameter has {}",
                    vel.len(),
                    param.numel()
                )));
            }
            let Some(grad) = param.grad() else { continue };
            let grad: Vec<S> = grad.to_vec();
            let data = param.data_mut();
            for ((v, &g), theta) in vel.iter_mut().zip(&grad).zip(data.iter_mut()) {
                *v = mu * *v + (g + wd * *theta);
                *theta = *theta - lr * *v;
            }
        }
        Ok(())
    }

    /// Velocity buffers paired with their parameter names, in update order.
    pub fn velocity_entries(&self, store: &ParamStore<S>) -> Vec<(String, Vec<S>)> {
        self.keys
            .iter()
            .zip(&self.velocity)
            .map(|(&k, v)| (store.get(k).name().to_string(), v.clone()))
            .collect()
    }

    /// Overwrite one velocity buffer by parameter name.
    pub fn load_velocity(
        &mut self,
        store: &ParamStore<S>,
        name: &str,
        data: &[S],
    ) -> Result<()> {
        let slot = self
            .keys
            .iter()
            .position(|&k| store.get(k).name() == name)
            .ok_or_else(|| {
                Error::usage(format!("no velocity slot for parameter `{name}`"))
            })?;
        if self.velocity[slot].len() != data.len() {
            return Err(Error::usage(format!(
                "velocity for `{name}` expects {} scalars, got {}",
                self.velocity[slot].len(),
                data.len()
            )));
        }
        self.velocity[slot].copy_from_slice(data);
        Ok(())
    }
}
