//! Named parameter and buffer storage.
//!
//! Registration order is load-bearing: checkpoints serialize entries in the
//! order they were added, and initialization draws from the RNG in that same
//! order, so two models built from the same config and seed are identical.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer, receives gradients.
    Trainable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

pub struct Param<S: Scalar = f32> {
    name: String,
    kind: ParamKind,
    pub tensor: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }
}

/// Keys for one batch-norm layer's parameters and running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BnKeys {
    pub gamma: ParamKey,
    pub beta: ParamKey,
    pub running_mean: ParamKey,
    pub running_var: ParamKey,
}

#[derive(Default)]
pub struct ParamStore<S: Scalar = f32> {
    entries: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    fn add(&mut self, name: &str, kind: ParamKind, tensor: Tensor<S>) -> Result<ParamKey> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let key = ParamKey(self.entries.len());
        self.index.insert(name.to_string(), key.0);
        self.entries.push(Param { name: name.to_string(), kind, tensor });
        Ok(key)
    }

    pub fn add_trainable(&mut self, name: &str, tensor: Tensor<S>) -> Result<ParamKey> {
        self.add(name, ParamKind::Trainable, tensor)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<S>) -> Result<ParamKey> {
        self.add(name, ParamKind::Buffer, tensor)
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.index.get(name).map(|&i| ParamKey(i))
    }

    pub fn get(&self, key: ParamKey) -> &Param<S> {
        &self.entries[key.0]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Param<S> {
        &mut self.entries[key.0]
    }

    pub fn tensor(&self, key: ParamKey) -> &Tensor<S> {
        &self.entries[key.0].tensor
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> &mut Tensor<S> {
        &mut self.entries[key.0].tensor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Param<S>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamKey(i), p))
    }

    /// Keys of trainable entries in registration order.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            if p.kind == ParamKind::Trainable {
                p.tensor.zero_grad();
            }
        }
    }

    /// Total scalar count across trainable entries.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    fn he_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<ParamKey> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<S> =
            (0..numel).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect();
        self.add_trainable(name, Tensor::new(shape, data)?)
    }

    /// Register a convolution's weight and bias: He-uniform weight over
    /// fan-in = Cin*Kh*Kw, zero bias.
    pub fn add_conv(
        &mut self,
        name: &str,
        spec: &ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ParamKey, ParamKey)> {
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let weight = self.he_uniform(
            &format!("{name}.weight"),
            vec![spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w],
            fan_in,
            rng,
        )?;
        let bias =
            self.add_trainable(&format!("{name}.bias"), Tensor::zeros(vec![spec.out_channels]))?;
        Ok((weight, bias))
    }

    /// Register a dense layer's weight [out, in] and zero bias [out].
    pub fn add_dense(
        &mut self,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ParamKey, ParamKey)> {
        let weight = self.he_uniform(
            &format!("{name}.weight"),
            vec![out_features, in_features],
            in_features,
            rng,
        )?;
        let bias = self.add_trainable(&format!("{name}.bias"), Tensor::zeros(vec![out_features]))?;
        Ok((weight, bias))
    }

    /// Register batch-norm state: gamma = 1, beta = 0, running mean 0, var 1.
    pub fn add_batchnorm(&mut self, name: &str, channels: usize) -> Result<BnKeys> {
        let gamma = self
            .add_trainable(&format!("{name}.gamma"), Tensor::full(vec![channels], S::one()))?;
        let beta = self.add_trainable(&format!("{name}.beta"), Tensor::zeros(vec![channels]))?;
        let running_mean =
            self.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(vec![channels]))?;
        let running_var = self
            .add_buffer(&format!("{name}.running_var"), Tensor::full(vec![channels], S::one()))?;
        Ok(BnKeys { gamma, beta, running_mean, running_var })
    }
}

impl<S: Scalar> fmt::Debug for ParamStore<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamStore").field("entries", &self.entries.len()).finish()
    }
}
