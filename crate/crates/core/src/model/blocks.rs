//! Branch building blocks: convolution wrappers, inception blocks,
//! residual stages, and the auxiliary classifier.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::config::{InceptionBlockSpec, ModelConfig, ResidualStageSpec, BN_EPS, BN_MOMENTUM};
use crate::params::{BnKeys, ParamKey, ParamStore};
use crate::tensor::{ConvSpec, Scalar, Tape, Var};

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: ParamKey,
    pub bias: ParamKey,
    pub spec: ConvSpec,
}

impl ConvParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvParams> {
        let (weight, bias) = store.add_conv(name, &spec, rng)?;
        Ok(ConvParams { weight, bias, spec })
    }
}

#[derive(Debug, Clone)]
pub struct DenseParams {
    pub weight: ParamKey,
    pub bias: ParamKey,
    pub in_features: usize,
    pub out_features: usize,
}

impl DenseParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<DenseParams> {
        let (weight, bias) = store.add_dense(name, in_features, out_features, rng)?;
        Ok(DenseParams { weight, bias, in_features, out_features })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dense(x, w, b)
    }
}

/// conv -> ReLU, the unit the inception paths are made of.
pub fn conv_relu<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    conv: &ConvParams,
) -> Result<Var> {
    let w = tape.param(store, conv.weight);
    let b = tape.param(store, conv.bias);
    let y = tape.conv2d(x, w, b, &conv.spec)?;
    Ok(tape.relu(y))
}

fn conv1x1(in_channels: usize, out_channels: usize) -> ConvSpec {
    ConvSpec::new(in_channels, out_channels, 1, 1, 0)
}

fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> ConvSpec {
    ConvSpec::new(in_channels, out_channels, 3, stride, 1)
}

/// Four parallel paths over the same input, concatenated along channels:
/// 1x1, 1x1 -> 3x3, 1x1 -> 5x5, and 3x3 max pool -> 1x1. Every conv is
/// followed by ReLU and spatial extent is preserved.
#[derive(Debug, Clone)]
pub struct InceptionBlockParams {
    pub p1: ConvParams,
    pub p3_reduce: ConvParams,
    pub p3: ConvParams,
    pub p5_reduce: ConvParams,
    pub p5: ConvParams,
    pub pool_proj: ConvParams,
}

impl InceptionBlockParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        spec: InceptionBlockSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<InceptionBlockParams> {
        Ok(InceptionBlockParams {
            p1: ConvParams::register(
                store,
                &format!("{name}.p1"),
                conv1x1(in_channels, spec.p1),
                rng,
            )?,
            p3_reduce: ConvParams::register(
                store,
                &format!("{name}.p3_reduce"),
                conv1x1(in_channels, spec.p3_reduce),
                rng,
            )?,
            p3: ConvParams::register(
                store,
                &format!("{name}.p3"),
                conv3x3(spec.p3_reduce, spec.p3, 1),
                rng,
            )?,
            p5_reduce: ConvParams::register(
                store,
                &format!("{name}.p5_reduce"),
                conv1x1(in_channels, spec.p5_reduce),
                rng,
            )?,
            p5: ConvParams::register(
                store,
                &format!("{name}.p5"),
                ConvSpec::new(spec.p5_reduce, spec.p5, 5, 1, 2),
                rng,
            )?,
            pool_proj: ConvParams::register(
                store,
                &format!("{name}.pool_proj"),
                conv1x1(in_channels, spec.pool_proj),
                rng,
            )?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let a = conv_relu(tape, store, x, &self.p1)?;
        let b = conv_relu(tape, store, x, &self.p3_reduce)?;
        let b = conv_relu(tape, store, b, &self.p3)?;
        let c = conv_relu(tape, store, x, &self.p5_reduce)?;
        let c = conv_relu(tape, store, c, &self.p5)?;
        let pooled = tape.max_pool2d(x, 3, 1, 1)?;
        let d = conv_relu(tape, store, pooled, &self.pool_proj)?;
        tape.concat_channels(&[a, b, c, d])
    }
}

/// Two 3x3 convs with batch norm, added to a shortcut before the final
/// ReLU. The shortcut is identity unless shape changes, in which case a
/// 1x1 conv with batch norm projects it.
#[derive(Debug, Clone)]
pub struct ResidualStageParams {
    pub conv1: ConvParams,
    pub bn1: BnKeys,
    pub conv2: ConvParams,
    pub bn2: BnKeys,
    pub projection: Option<(ConvParams, BnKeys)>,
}

impl ResidualStageParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        spec: ResidualStageSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<ResidualStageParams> {
        let conv1 = ConvParams::register(
            store,
            &format!("{name}.conv1"),
            conv3x3(spec.in_channels, spec.out_channels, spec.stride),
            rng,
        )?;
        let bn1 = store.add_batchnorm(&format!("{name}.bn1"), spec.out_channels)?;
        let conv2 = ConvParams::register(
            store,
            &format!("{name}.conv2"),
            conv3x3(spec.out_channels, spec.out_channels, 1),
            rng,
        )?;
        let bn2 = store.add_batchnorm(&format!("{name}.bn2"), spec.out_channels)?;
        let projection = if spec.needs_projection() {
            let conv = ConvParams::register(
                store,
                &format!("{name}.proj"),
                ConvSpec::new(spec.in_channels, spec.out_channels, 1, spec.stride, 0),
                rng,
            )?;
            let bn = store.add_batchnorm(&format!("{name}.proj_bn"), spec.out_channels)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(ResidualStageParams { conv1, bn1, conv2, bn2, projection })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let w1 = tape.param(store, self.conv1.weight);
        let b1 = tape.param(store, self.conv1.bias);
        let y = tape.conv2d(x, w1, b1, &self.conv1.spec)?;
        let y = tape.batch_norm(store, y, &self.bn1, BN_EPS, BN_MOMENTUM)?;
        let y = tape.relu(y);
        let w2 = tape.param(store, self.conv2.weight);
        let b2 = tape.param(store, self.conv2.bias);
        let y = tape.conv2d(y, w2, b2, &self.conv2.spec)?;
        let y = tape.batch_norm(store, y, &self.bn2, BN_EPS, BN_MOMENTUM)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let w = tape.param(store, conv.weight);
                let b = tape.param(store, conv.bias);
                let s = tape.conv2d(x, w, b, &conv.spec)?;
                tape.batch_norm(store, s, bn, BN_EPS, BN_MOMENTUM)?
            }
            None => x,
        };
        let sum = tape.add(y, shortcut)?;
        Ok(tape.relu(sum))
    }
}

/// Auxiliary classifier tapped from the middle of the inception branch:
/// avg pool -> 1x1 reduction conv -> ReLU -> dense -> ReLU ->
/// dropout -> dense logits. Only consulted in training mode.
#[derive(Debug, Clone)]
pub struct AuxParams {
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub reduce: ConvParams,
    pub fc1: DenseParams,
    pub fc2: DenseParams,
    pub dropout: f64,
}

impl AuxParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        config: &ModelConfig,
        tap_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<AuxParams> {
        let (pool_kernel, pool_stride) = config.aux_pool();
        let tap = config.aux_tap_spatial();
        let pooled = (tap - pool_kernel) / pool_stride + 1;
        let reduce = ConvParams::register(
            store,
            &format!("{name}.reduce"),
            conv1x1(tap_channels, config.aux_reduce_channels),
            rng,
        )?;
        let flat = config.aux_reduce_channels * pooled * pooled;
        let fc1 =
            DenseParams::register(store, &format!("{name}.fc1"), flat, config.aux_hidden, rng)?;
        let fc2 = DenseParams::register(
            store,
            &format!("{name}.fc2"),
            config.aux_hidden,
            config.num_classes,
            rng,
        )?;
        Ok(AuxParams {
            pool_kernel,
            pool_stride,
            reduce,
            fc1,
            fc2,
            dropout: config.aux_dropout,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        tap: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let pooled = tape.avg_pool2d(tap, self.pool_kernel, self.pool_stride)?;
        let reduced = conv_relu(tape, store, pooled, &self.reduce)?;
        let flat = tape.flatten(reduced)?;
        let h = self.fc1.forward(tape, store, flat)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.dropout, rng)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Inception branch: stem conv -> pool -> two blocks -> aux tap ->
/// pool -> third block. No batch norm anywhere in this branch.
#[derive(Debug, Clone)]
pub struct InceptionBranchParams {
    pub stem: ConvParams,
    pub blocks: Vec<InceptionBlockParams>,
    pub aux: AuxParams,
}

impl InceptionBranchParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<InceptionBranchParams> {
        let stem = ConvParams::register(
            store,
            "inception.stem",
            conv3x3(1, config.stem_channels, 1),
            rng,
        )?;
        let mut blocks = Vec::new();
        let mut in_channels = config.stem_channels;
        for (i, spec) in config.inception_blocks.iter().enumerate() {
            blocks.push(InceptionBlockParams::register(
                store,
                &format!("inception.block{}", i + 1),
                in_channels,
                *spec,
                rng,
            )?);
            in_channels = spec.out_channels();
        }
        let tap_channels = config.inception_blocks[1].out_channels();
        let aux = AuxParams::register(store, "inception.aux", config, tap_channels, rng)?;
        Ok(InceptionBranchParams { stem, blocks, aux })
    }

    /// Returns the branch output and, when asked, the aux logits.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        input: Var,
        rng: &mut ChaCha8Rng,
        with_aux: bool,
    ) -> Result<(Var, Option<Var>)> {
        let x = conv_relu(tape, store, input, &self.stem)?;
        let x = tape.avg_pool2d(x, 2, 2)?;
        let x = self.blocks[0].forward(tape, store, x)?;
        let tap = self.blocks[1].forward(tape, store, x)?;
        let aux = if with_aux {
            Some(self.aux.forward(tape, store, tap, rng)?)
        } else {
            None
        };
        let x = tape.avg_pool2d(tap, 2, 2)?;
        let x = self.blocks[2].forward(tape, store, x)?;
        Ok((x, aux))
    }
}

/// Residual branch: stem conv with batch norm, then three stages.
#[derive(Debug, Clone)]
pub struct ResidualBranchParams {
    pub stem: ConvParams,
    pub stem_bn: BnKeys,
    pub stages: Vec<ResidualStageParams>,
}

impl ResidualBranchParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<ResidualBranchParams> {
        let stem = ConvParams::register(
            store,
            "residual.stem",
            conv3x3(1, config.stem_channels, 1),
            rng,
        )?;
        let stem_bn = store.add_batchnorm("residual.stem_bn", config.stem_channels)?;
        let mut stages = Vec::new();
        for (i, spec) in config.residual_stages.iter().enumerate() {
            stages.push(ResidualStageParams::register(
                store,
                &format!("residual.stage{}", i + 1),
                *spec,
                rng,
            )?);
        }
        Ok(ResidualBranchParams { stem, stem_bn, stages })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        input: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.stem.weight);
        let b = tape.param(store, self.stem.bias);
        let x = tape.conv2d(input, w, b, &self.stem.spec)?;
        let x = tape.batch_norm(store, x, &self.stem_bn, BN_EPS, BN_MOMENTUM)?;
        let mut x = tape.relu(x);
        for stage in &self.stages {
            x = stage.forward(tape, store, x)?;
        }
        Ok(x)
    }
}
