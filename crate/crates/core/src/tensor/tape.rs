//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node holding its result and enough saved state
//! to run its backward rule. A node's inputs always have smaller indices, so
//! the tape is acyclic by construction and a single reverse sweep visits
//! nodes in valid topological order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, BnSaved};
use super::{ConvSpec, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::{BnKeys, ParamKey, ParamStore};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Saved state per op, consumed by the backward sweep.
pub enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
        batch: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        inner: usize,
        saved: BnSaved<S>,
    },
    Relu {
        input: Var,
    },
    AvgPool {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
        oh: usize,
        ow: usize,
    },
    MaxPool {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        batch_channels: usize,
        spatial: usize,
    },
    Softmax {
        input: Var,
        rows: usize,
        cols: usize,
    },
    /// Mask entries are 0 or 1/(1-rate); forward is an elementwise product.
    Dropout {
        input: Var,
        mask: Vec<S>,
    },
    ConcatChannels {
        inputs: Vec<Var>,
        batch: usize,
        channel_sizes: Vec<usize>,
        spatial: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: S,
    },
    Reshape {
        input: Var,
    },
    /// Per-channel gate broadcast over spatial positions.
    ChannelScale {
        input: Var,
        gate: Var,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        batch: usize,
        classes: usize,
    },
    SumAll {
        input: Var,
        numel: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Dense,
    BatchNorm,
    Relu,
    AvgPool,
    MaxPool,
    GlobalAvgPool,
    Softmax,
    Dropout,
    ConcatChannels,
    Add,
    Scale,
    Reshape,
    ChannelScale,
    CrossEntropy,
    SumAll,
}

impl<S: Scalar> Op<S> {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Dense { .. } => OpKind::Dense,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SumAll { .. } => OpKind::SumAll,
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    /// Set when this leaf mirrors a store parameter; backward accumulates
    /// the leaf gradient into that parameter.
    param: Option<ParamKey>,
}

/// Multiplies one op kind's propagated input gradient, for testing that the
/// gradient checker actually catches broken backward rules.
#[derive(Debug, Clone, Copy)]
pub struct BackwardFault {
    pub kind: OpKind,
    pub scale: f64,
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    mode: Mode,
    fault: Option<BackwardFault>,
}

impl<S: Scalar> Tape<S> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, fault: None }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn inject_backward_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn op_kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Gradient of the last backward sweep w.r.t. this node, if it received one.
    pub fn grad(&self, var: Var) -> Option<&[S]> {
        self.nodes[var.0].value.grad()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let var = Var(self.nodes.len());
        self.nodes.push(Node { value, op, param: None });
        var
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a leaf mirroring a store parameter; its gradient flows back
    /// into the store on `backward`.
    pub fn param(&mut self, store: &ParamStore<S>, key: ParamKey) -> Var {
        let var = self.push(store.tensor(key).clone(), Op::Leaf);
        self.nodes[var.0].param = Some(key);
        var
    }

    fn dims(&self, var: Var, rank: usize, what: &str) -> Result<Vec<usize>> {
        let shape = self.shape(var);
        if shape.len() != rank {
            return Err(Error::dim(format!(
                "{what}: expected rank {rank}, got shape {shape:?}"
            )));
        }
        Ok(shape.to_vec())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        let x = self.dims(input, 4, "conv2d input")?;
        let w = self.dims(weight, 4, "conv2d weight")?;
        let b = self.dims(bias, 1, "conv2d bias")?;
        if x[1] != spec.in_channels {
            return Err(Error::dim(format!(
                "conv2d: input has {} channels, spec expects {}",
                x[1], spec.in_channels
            )));
        }
        if w != [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w] {
            return Err(Error::dim(format!(
                "conv2d: weight shape {w:?} does not match spec {spec:?}"
            )));
        }
        if b[0] != spec.out_channels {
            return Err(Error::dim(format!(
                "conv2d: bias has {} entries, spec expects {}",
                b[0], spec.out_channels
            )));
        }
        let (batch, h, wid) = (x[0], x[2], x[3]);
        let (oh, ow) = spec.out_hw(h, wid)?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            batch,
            h,
            wid,
            self.value(weight).data(),
            self.value(bias).data(),
            spec,
            oh,
            ow,
        );
        let value = Tensor::new(vec![batch, spec.out_channels, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d { input, weight, bias, spec: spec.clone(), batch, h, w: wid, oh, ow },
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.dims(input, 2, "dense input")?;
        let w = self.dims(weight, 2, "dense weight")?;
        let b = self.dims(bias, 1, "dense bias")?;
        if x[1] != w[1] {
            return Err(Error::dim(format!(
                "dense: input features {} do not match weight columns {}",
                x[1], w[1]
            )));
        }
        if b[0] != w[0] {
            return Err(Error::dim(format!(
                "dense: bias has {} entries, weight has {} rows",
                b[0], w[0]
            )));
        }
        let (batch, n, m) = (x[0], x[1], w[0]);
        let out = kernels::dense_forward(
            self.value(input).data(),
            batch,
            n,
            self.value(weight).data(),
            self.value(bias).data(),
            m,
        );
        let value = Tensor::new(vec![batch, m], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias, batch, in_features: n, out_features: m }))
    }

    /// Batch normalization over the channel axis of a [B, C] or [B, C, H, W]
    /// input. Train mode uses batch statistics and updates the running
    /// buffers in the store; eval mode normalizes with the running buffers.
    pub fn batch_norm(
        &mut self,
        store: &mut ParamStore<S>,
        input: Var,
        keys: &BnKeys,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (batch, channels, inner) = match shape.len() {
            2 => (shape[0], shape[1], 1),
            4 => (shape[0], shape[1], shape[2] * shape[3]),
            _ => {
                return Err(Error::dim(format!(
                    "batch_norm: expected rank 2 or 4 input, got shape {shape:?}"
                )))
            }
        };
        let gamma_len = store.tensor(keys.gamma).numel();
        if gamma_len != channels {
            return Err(Error::dim(format!(
                "batch_norm: input has {channels} channels, parameters have {gamma_len}"
            )));
        }
        if self.mode == Mode::Train && batch < 2 {
            return Err(Error::config(format!(
                "batch_norm: train mode needs batch size >= 2, got {batch}"
            )));
        }
        let gamma = self.param(store, keys.gamma);
        let beta = self.param(store, keys.beta);
        let (out, saved, updated) = kernels::batchnorm_forward(
            self.value(input).data(),
            batch,
            channels,
            inner,
            self.value(gamma).data(),
            self.value(beta).data(),
            store.tensor(keys.running_mean).data(),
            store.tensor(keys.running_var).data(),
            self.mode == Mode::Train,
            eps,
            momentum,
        );
        if let Some((new_mean, new_var)) = updated {
            store.tensor_mut(keys.running_mean).data_mut().copy_from_slice(&new_mean);
            store.tensor_mut(keys.running_var).data_mut().copy_from_slice(&new_var);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, batch, channels, inner, saved }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<S> =
            self.value(input).data().iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect();
        let value = Tensor::new(self.shape(input).to_vec(), out).expect("same shape");
        self.push(value, Op::Relu { input })
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.dims(input, 4, "avg_pool2d input")?;
        let (batch, channels, h, w) = (x[0], x[1], x[2], x[3]);
        if kernel > h || kernel > w {
            return Err(Error::dim(format!(
                "avg_pool2d: kernel {kernel} exceeds input {h}x{w}"
            )));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let planes = batch * channels;
        let out =
            kernels::avg_pool_forward(self.value(input).data(), planes, h, w, kernel, stride, oh, ow);
        let value = Tensor::new(vec![batch, channels, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { input, planes, h, w, kernel, stride, oh, ow }))
    }

    pub fn max_pool2d(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.dims(input, 4, "max_pool2d input")?;
        let (batch, channels, h, w) = (x[0], x[1], x[2], x[3]);
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::dim(format!(
                "max_pool2d: kernel {kernel} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let planes = batch * channels;
        let (out, argmax) = kernels::max_pool_forward(
            self.value(input).data(),
            planes,
            h,
            w,
            kernel,
            stride,
            padding,
            oh,
            ow,
        );
        let value = Tensor::new(vec![batch, channels, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, planes, h, w, oh, ow, argmax }))
    }

    /// Mean over the spatial axes: [B, C, H, W] -> [B, C].
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.dims(input, 4, "global_avg_pool input")?;
        let (batch, channels, h, w) = (x[0], x[1], x[2], x[3]);
        let spatial = h * w;
        let data = self.value(input).data();
        let norm = S::from_f64(spatial as f64);
        let mut out = vec![S::zero(); batch * channels];
        for (p, o) in out.iter_mut().enumerate() {
            let plane = &data[p * spatial..(p + 1) * spatial];
            *o = plane.iter().copied().sum::<S>() / norm;
        }
        let value = Tensor::new(vec![batch, channels], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input, batch_channels: batch * channels, spatial }))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.dims(input, 2, "softmax input")?;
        let (rows, cols) = (x[0], x[1]);
        let out = kernels::softmax_forward(self.value(input).data(), rows, cols);
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::Softmax { input, rows, cols }))
    }

    /// Inverted dropout. Keeps each element with probability 1-rate and
    /// scales by 1/(1-rate). In eval mode or at rate 0 the input var is
    /// returned unchanged, so those paths are exact identities.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep_scale })
            .collect();
        let out: Vec<S> =
            self.value(input).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { input, mask }))
    }

    /// Concatenate [B, Ci, H, W] inputs along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::dim("concat_channels: no inputs".to_string()));
        }
        let first = self.dims(inputs[0], 4, "concat_channels input")?;
        let (batch, h, w) = (first[0], first[2], first[3]);
        let mut channel_sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.dims(v, 4, "concat_channels input")?;
            if s[0] != batch || s[2] != h || s[3] != w {
                return Err(Error::dim(format!(
                    "concat_channels: shape {s:?} incompatible with {first:?}"
                )));
            }
            channel_sizes.push(s[1]);
        }
        let total_c: usize = channel_sizes.iter().sum();
        let spatial = h * w;
        let mut out = vec![S::zero(); batch * total_c * spatial];
        for b in 0..batch {
            let mut offset = 0;
            for (&v, &c) in inputs.iter().zip(&channel_sizes) {
                let src = &self.value(v).data()[b * c * spatial..(b + 1) * c * spatial];
                out[(b * total_c + offset) * spatial..][..c * spatial].copy_from_slice(src);
                offset += c;
            }
        }
        let value = Tensor::new(vec![batch, total_c, h, w], out)?;
        Ok(self.push(
            value,
            Op::ConcatChannels { inputs: inputs.to_vec(), batch, channel_sizes, spatial },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let out: Vec<S> = self.value(input).data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(self.shape(input).to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { input, factor })
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::dim(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(input)
            )));
        }
        let value = Tensor::new(shape, self.value(input).data().to_vec())?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// [B, C, H, W] -> [B, C*H*W].
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.dims(input, 4, "flatten input")?;
        self.reshape(input, vec![x[0], x[1] * x[2] * x[3]])
    }

    /// Multiply each channel of [B, C, H, W] by a per-sample gate [B, C].
    pub fn channel_scale(&mut self, input: Var, gate: Var) -> Result<Var> {
        let x = self.dims(input, 4, "channel_scale input")?;
        let g = self.dims(gate, 2, "channel_scale gate")?;
        if g[0] != x[0] || g[1] != x[1] {
            return Err(Error::dim(format!(
                "channel_scale: gate {g:?} does not match input {x:?}"
            )));
        }
        let (batch, channels, spatial) = (x[0], x[1], x[2] * x[3]);
        let gate_data = self.value(gate).data();
        let mut out = vec![S::zero(); self.value(input).numel()];
        for p in 0..batch * channels {
            let gv = gate_data[p];
            let src = &self.value(input).data()[p * spatial..(p + 1) * spatial];
            for (o, &xv) in out[p * spatial..(p + 1) * spatial].iter_mut().zip(src) {
                *o = xv * gv;
            }
        }
        let value = Tensor::new(x.clone(), out)?;
        Ok(self.push(value, Op::ChannelScale { input, gate, batch, channels, spatial }))
    }

    /// Fused softmax + negative log likelihood, averaged over the batch.
    /// Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.dims(logits, 2, "cross_entropy logits")?;
        let (batch, classes) = (x[0], x[1]);
        if labels.len() != batch {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!(
                "cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let loss = kernels::cross_entropy_forward(self.value(logits).data(), batch, classes, labels);
        let value = Tensor::new(vec![1], vec![loss])?;
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec(), batch, classes },
        ))
    }

    /// Sum every element into a scalar node.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let total: S = self.value(input).data().iter().copied().sum();
        let numel = self.value(input).numel();
        let value = Tensor::new(vec![1], vec![total]).expect("scalar");
        self.push(value, Op::SumAll { input, numel })
    }

    /// Reverse sweep from a scalar loss. Node gradients are accumulated into
    /// each node's tensor, and parameter-leaf gradients additionally
    /// accumulate into the store, so repeated sweeps sum until zeroed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        let fault = self.fault;
        let accum = |grads: &mut Vec<Option<Vec<S>>>, var: Var, delta: &[S]| {
            match &mut grads[var.0] {
                Some(g) => {
                    for (a, &d) in g.iter_mut().zip(delta) {
                        *a = *a + d;
                    }
                }
                slot => {
                    *slot = Some(delta.to_vec());
                }
            }
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let g = match fault {
                Some(f) if f.kind == self.nodes[i].op.kind() => {
                    let s = S::from_f64(f.scale);
                    g.iter().map(|&v| v * s).collect()
                }
                _ => g,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { input, weight, bias, spec, batch, h, w, oh, ow } => {
                    let out = kernels::conv2d_backward(
                        self.nodes[input.0].value.data(),
                        *batch,
                        *h,
                        *w,
                        self.nodes[weight.0].value.data(),
                        spec,
                        *oh,
                        *ow,
                        &g,
                    );
                    let (input, weight, bias) = (*input, *weight, *bias);
                    accum(&mut grads, input, &out.d_input);
                    accum(&mut grads, weight, &out.d_weight);
                    accum(&mut grads, bias, &out.d_bias);
                }
                Op::Dense { input, weight, bias, batch, in_features, out_features } => {
                    let out = kernels::dense_backward(
                        self.nodes[input.0].value.data(),
                        *batch,
                        *in_features,
                        self.nodes[weight.0].value.data(),
                        *out_features,
                        &g,
                    );
                    let (input, weight, bias) = (*input, *weight, *bias);
                    accum(&mut grads, input, &out.d_input);
                    accum(&mut grads, weight, &out.d_weight);
                    accum(&mut grads, bias, &out.d_bias);
                }
                Op::BatchNorm { input, gamma, beta, batch, channels, inner, saved } => {
                    let out = kernels::batchnorm_backward(
                        saved,
                        *batch,
                        *channels,
                        *inner,
                        self.nodes[gamma.0].value.data(),
                        &g,
                    );
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    accum(&mut grads, input, &out.d_input);
                    accum(&mut grads, gamma, &out.d_gamma);
                    accum(&mut grads, beta, &out.d_beta);
                }
                Op::Relu { input } => {
                    let d: Vec<S> = self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gi)| if x > S::zero() { gi } else { S::zero() })
                        .collect();
                    let input = *input;
                    accum(&mut grads, input, &d);
                }
                Op::AvgPool { input, planes, h, w, kernel, stride, oh, ow } => {
                    let d = kernels::avg_pool_backward(*planes, *h, *w, *kernel, *stride, *oh, *ow, &g);
                    let input = *input;
                    accum(&mut grads, input, &d);
                }
                Op::MaxPool { input, planes, h, w, oh, ow, argmax } => {
                    let d = kernels::max_pool_backward(*planes, *h, *w, *oh, *ow, argmax, &g);
                    let input = *input;
                    accum(&mut grads, input, &d);
                }
                Op::GlobalAvgPool { input, batch_channels, spatial } => {
                    let norm = S::from_f64(*spatial as f64);
                    let mut d = vec![S::zero(); batch_channels * spatial];
                    for p in 0..*batch_channels {
                        let gv = g[p] / norm;
                        for v in d[p * spatial..(p + 1) * spatial].iter_mut() {
                            *v = gv;
                        }
                    }
                    let input = *input;
                    accum(&mut grads, input, &d);
                }
                Op::Softmax { input, rows, cols } => {
                    let d = kernels::softmax_backward(self.nodes[i].value.data(), *rows, *cols, &g);
                    let input = *input;
                    accum(&mut grads, input, &d);
                }
                Op::Dropout { input, mask } => {
                    let d: Vec<S> = mask.iter().zip(&g).map(|(&m, &gi)| m * gi).collect();
                    let input = *input;
                    accum(&mut grads, input, &d);
                }
                Op::ConcatChannels { inputs, batch, channel_sizes, spatial } => {
                    let total_c: usize = channel_sizes.iter().sum();
                    let parts: Vec<(Var, Vec<S>)> = {
                        let mut parts = Vec::with_capacity(inputs.len());
                        let mut offset = 0;
                        for (&v, &c) in inputs.iter().zip(channel_sizes) {
                            let mut d = vec![S::zero(); batch * c * spatial];
                            for b in 0..*batch {
                                let src = &g[(b * total_c + offset) * spatial..][..c * spatial];
                                d[b * c * spatial..(b + 1) * c * spatial].copy_from_slice(src);
                            }
                            parts.push((v, d));
                            offset += c;
                        }
                        parts
                    };
                    for (v, d) in parts {
                        accum(&mut grads, v, &d);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accum(&mut grads, a, &g);
                    accum(&mut grads, b, &g);
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    let d: Vec<S> = g.iter().map(|&gi| gi * f).collect();
                    let input = *input;
                    accum(&mut grads, input, &d);
                }
                Op::Reshape { input } => {
                    let input = *input;
                    accum(&mut grads, input, &g);
                }
                Op::ChannelScale { input, gate, batch, channels, spatial } => {
                    let gate_data = self.nodes[gate.0].value.data();
                    let input_data = self.nodes[input.0].value.data();
                    let mut d_input = vec![S::zero(); input_data.len()];
                    let mut d_gate = vec![S::zero(); batch * channels];
                    for p in 0..batch * channels {
                        let gv = gate_data[p];
                        let mut dot = S::zero();
                        for j in 0..*spatial {
                            let gi = g[p * spatial + j];
                            d_input[p * spatial + j] = gi * gv;
                            dot = dot + gi * input_data[p * spatial + j];
                        }
                        d_gate[p] = dot;
                    }
                    let (input, gate) = (*input, *gate);
                    accum(&mut grads, input, &d_input);
                    accum(&mut grads, gate, &d_gate);
                }
                Op::CrossEntropy { logits, labels, batch, classes } => {
                    let d = kernels::cross_entropy_backward(
                        self.nodes[logits.0].value.data(),
                        *batch,
                        *classes,
                        labels,
                        g[0],
                    );
                    let logits = *logits;
                    accum(&mut grads, logits, &d);
                }
                Op::SumAll { input, numel } => {
                    let d = vec![g[0]; *numel];
                    let input = *input;
                    accum(&mut grads, input, &d);
                }
            }
            // Reattach so callers can read node gradients after the sweep.
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            self.nodes[i].value.accumulate_grad(&g);
            if let Some(key) = self.nodes[i].param {
                store.tensor_mut(key).accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Verify every node value is finite; names the op kind and node index
    /// of the first offender.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            node.value
                .check_finite(&format!("node {i} ({:?})", node.op.kind()))
                .map_err(|e| Error::numeric(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape.to_vec(), data).unwrap()
    }

    /// 6-nested-loop convolution, independent of the im2col path.
    fn conv_oracle(
        input: &[f64],
        (b, cin, h, w): (usize, usize, usize, usize),
        weight: &[f64],
        bias: &[f64],
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input
                                        [((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * weight[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn fill_pattern(n: usize, scale: f64, shift: f64) -> Vec<f64> {
        // Deterministic, sign-varying values without pulling in an RNG.
        (0..n).map(|i| ((i * 2654435761 % 97) as f64 / 48.5 - 1.0) * scale + shift).collect()
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle_over_grid() {
        for &k in &[1usize, 3, 5] {
            for &stride in &[1usize, 2, 3] {
                for &pad in &[0usize, 1, 2] {
                    let (b, cin, cout, h, w) = (2usize, 3usize, 4usize, 11usize, 9usize);
                    if h + 2 * pad < k || w + 2 * pad < k {
                        continue;
                    }
                    let input = fill_pattern(b * cin * h * w, 1.0, 0.0);
                    let weight = fill_pattern(cout * cin * k * k, 0.5, 0.01);
                    let bias = fill_pattern(cout, 0.2, 0.0);
                    let expected =
                        conv_oracle(&input, (b, cin, h, w), &weight, &bias, cout, k, stride, pad);

                    let mut tape: Tape<f64> = Tape::new(Mode::Train);
                    let x = tape.leaf(t(&[b, cin, h, w], &input));
                    let wv = tape.leaf(t(&[cout, cin, k, k], &weight));
                    let bv = tape.leaf(t(&[cout], &bias));
                    let spec = ConvSpec::new(cin, cout, k, stride, pad);
                    let y = tape.conv2d(x, wv, bv, &spec).unwrap();
                    let got = tape.value(y).data();
                    assert_eq!(got.len(), expected.len(), "k={k} s={stride} p={pad}");
                    for (i, (&a, &e)) in got.iter().zip(&expected).enumerate() {
                        assert!(
                            (a - e).abs() <= 1e-6,
                            "k={k} s={stride} p={pad} idx={i}: {a} vs {e}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dense_matches_explicit_dot_products() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]));
        let w = tape.leaf(t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]));
        let b = tape.leaf(t(&[2], &[1.0, -1.0]));
        let y = tape.dense(x, w, b).unwrap();
        // Row 0: [0.1+0.4+0.9+1, -0.4+1.0-1.8-1]; row 1: [-0.1+0.1+0.6+1, 0.4+0.25-1.2-1].
        let expected = [2.4, -2.2, 1.6, -1.55];
        for (&a, &e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_hand_value() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 2], &[0.0, 1.0]));
        let y = tape.softmax(x).unwrap();
        let got = tape.value(y).data();
        let e = 1.0 / (1.0 + 1.0f64.exp());
        assert!((got[0] - e).abs() < 1e-15);
        assert!((got[0] + got[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        // Logits [1, 2], label 1: loss = ln(1 + e^-1).
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let loss = tape.cross_entropy(x, &[1]).unwrap();
        let got = tape.value(loss).data()[0];
        assert!((got - 0.3132616875182228).abs() < 1e-15, "{got}");
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_batch() {
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(x, &[1, 0]).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        tape.backward(loss, &mut store).unwrap();
        let g = tape.grad(x).unwrap();
        let p = 1.0 / (1.0 + 1.0f64.exp());
        let expected = [p / 2.0, (1.0 - p - 1.0) / 2.0, (0.5 - 1.0) / 2.0, 0.5 / 2.0];
        for (&a, &e) in g.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn avg_pool_matches_hand_means() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 1, 4, 4], &(1..=16).map(|v| v as f64).collect::<Vec<_>>()));
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn max_pool_tracks_argmax_and_routes_gradient() {
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let y = tape.max_pool2d(x, 2, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let loss = tape.sum_all(y);
        let mut store: ParamStore<f64> = ParamStore::new();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_padding_never_wins() {
        // All-negative input: padded cells must not beat real values.
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 1, 2, 2], &[-5.0, -4.0, -3.0, -2.0]));
        let y = tape.max_pool2d(x, 3, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[-2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn global_avg_pool_means_channels() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 25.0]);
    }

    #[test]
    fn concat_channels_then_backward_splits_gradient() {
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let a = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 1, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = tape.reshape(y, vec![1, 6]).unwrap();
        let sm = tape.softmax(f).unwrap();
        let loss = tape.cross_entropy(f, &[0]).unwrap();
        let _ = sm;
        let mut store: ParamStore<f64> = ParamStore::new();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(tape.grad(a).unwrap().len(), 2);
        assert_eq!(tape.grad(b).unwrap().len(), 4);
    }

    #[test]
    fn concat_accepts_zero_channel_input() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let a = tape.leaf(t(&[1, 0, 1, 1], &[]));
        let b = tape.leaf(t(&[1, 2, 1, 1], &[7.0, 8.0]));
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 1, 1]);
        assert_eq!(tape.value(y).data(), &[7.0, 8.0]);
    }

    #[test]
    fn dropout_eval_and_rate_zero_are_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        assert_eq!(x, y, "eval mode must return the input var");

        let mut train: Tape<f64> = Tape::new(Mode::Train);
        let x = train.leaf(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let y = train.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y, "rate 0 must return the input var");
    }

    #[test]
    fn dropout_drop_fraction_near_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let n = 200_000usize;
        let x = tape.leaf(Tensor::full(vec![1, n], 1.0f64));
        let y = tape.dropout(x, 0.3, &mut rng).unwrap();
        let dropped = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.3).abs() <= 0.006, "drop fraction {frac}");
        let kept = tape.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (wk, bk) = store.add_dense("d", 2, 2, &mut rng).unwrap();

        let run = |store: &mut ParamStore<f64>| {
            let mut tape: Tape<f64> = Tape::new(Mode::Train);
            let x = tape.leaf(t(&[1, 2], &[1.0, -2.0]));
            let w = tape.param(store, wk);
            let b = tape.param(store, bk);
            let y = tape.dense(x, w, b).unwrap();
            let loss = tape.cross_entropy(y, &[0]).unwrap();
            tape.backward(loss, store).unwrap();
        };

        run(&mut store);
        let once: Vec<f64> = store.tensor(wk).grad().unwrap().to_vec();
        run(&mut store);
        let twice = store.tensor(wk).grad().unwrap();
        for (&a, &b) in twice.iter().zip(&once) {
            assert!((a - 2.0 * b).abs() < 1e-12, "{a} vs 2*{b}");
        }
        store.zero_grads();
        run(&mut store);
        let again = store.tensor(wk).grad().unwrap();
        for (&a, &b) in again.iter().zip(&once) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diamond_graph_fans_in_gradients() {
        // y = relu(x) + relu(x); dy/dx = 2 on the positive side.
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[1, 1, 1, 2], &[3.0, -1.0]));
        let a = tape.relu(x);
        let b = tape.relu(x);
        let y = tape.add(a, b).unwrap();
        let f = tape.reshape(y, vec![1, 2]).unwrap();
        let loss = tape.cross_entropy(f, &[0]).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        tape.backward(loss, &mut store).unwrap();
        let g = tape.grad(x).unwrap();
        // Gradient at the negative entry is exactly zero (both relus block it).
        assert_eq!(g[1], 0.0);
        assert!(g[0] != 0.0);
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let keys = store.add_batchnorm("bn", 1).unwrap();
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.batch_norm(&mut store, x, &keys, 1e-5, 0.1).unwrap();
        let out = tape.value(y).data();
        // mean 2.5, biased var 1.25.
        let istd = 1.0 / (1.25f64 + 1e-5).sqrt();
        for (i, &v) in out.iter().enumerate() {
            let e = ((i + 1) as f64 - 2.5) * istd;
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
        let rm = store.tensor(keys.running_mean).data()[0];
        let rv = store.tensor(keys.running_var).data()[0];
        assert!((rm - 0.25).abs() < 1e-12, "running mean {rm}");
        // Unbiased var = 5/3; running var = 0.9*1 + 0.1*5/3.
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12, "running var {rv}");
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let keys = store.add_batchnorm("bn", 1).unwrap();
        store.tensor_mut(keys.running_mean).data_mut()[0] = 2.0;
        store.tensor_mut(keys.running_var).data_mut()[0] = 4.0;
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 1], &[6.0]));
        let y = tape.batch_norm(&mut store, x, &keys, 0.0, 0.1).unwrap();
        assert!((tape.value(y).data()[0] - 2.0).abs() < 1e-12);
        // Eval must not touch the running buffers.
        assert_eq!(store.tensor(keys.running_mean).data()[0], 2.0);
        assert_eq!(store.tensor(keys.running_var).data()[0], 4.0);
    }

    #[test]
    fn batch_norm_train_rejects_batch_of_one() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let keys = store.add_batchnorm("bn", 2).unwrap();
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let err = tape.batch_norm(&mut store, x, &keys, 1e-5, 0.1).unwrap_err();
        assert!(err.to_string().contains("batch size"), "{err}");
    }

    #[test]
    fn channel_scale_broadcasts_gate() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gate = tape.leaf(t(&[1, 2], &[2.0, 0.5]));
        let y = tape.channel_scale(x, gate).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 1.5, 2.0]);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.leaf(t(&[2, 4], &[0.0; 8]));
        let b = tape.leaf(t(&[2], &[0.0; 2]));
        let err = tape.dense(x, w, b).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");

        let y = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let err = tape.add(x, y).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = tape.sum_all(x);
        let mut store: ParamStore<f64> = ParamStore::new();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_relu_on_negative_input_has_zero_gradient() {
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[1, 4], &[-1.0, -0.5, -3.0, -0.1]));
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        let mut store: ParamStore<f64> = ParamStore::new();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let mut store: ParamStore<f64> = ParamStore::new();
        let err = tape.backward(x, &mut store).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{err}");
    }

    #[test]
    fn node_indices_increase_monotonically() {
        // Inputs always precede consumers, which is what makes the single
        // reverse sweep a valid topological order.
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let s = tape.softmax(x).unwrap();
        let y = tape.scale(s, 2.0);
        assert!(x.0 < s.0 && s.0 < y.0);
    }
}
