//! The two-branch ensemble classifier: a miniature inception branch and
//! a miniature residual branch over the same grayscale input, fused
//! along channels, gated by channel attention, and classified by a
//! small dense head. Single-branch variants reuse the same attention
//! and head over their own output channels.

pub mod attention;
pub mod blocks;
pub mod config;
pub mod cost;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{derive, rng_for, stream};
use crate::tensor::gradcheck::{finite_diff_check, GradCheckReport};
use crate::tensor::{BackwardFault, Mode, Scalar, Tape, Tensor, Var};

pub use attention::{AttentionParams, HeadParams};
pub use blocks::{
    AuxParams, ConvParams, DenseParams, InceptionBlockParams, InceptionBranchParams,
    ResidualBranchParams, ResidualStageParams,
};
pub use config::{
    InceptionBlockSpec, ModelConfig, ResidualStageSpec, Variant, ATTENTION_REDUCTION,
    AUX_LOSS_WEIGHT, BN_EPS, BN_MOMENTUM,
};

/// Everything one forward pass produces: main logits, any auxiliary
/// logits (training mode only), the attention gates, and the pooled
/// feature embedding the classifier head reads.
#[derive(Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub aux_logits: Vec<Var>,
    pub gates: Var,
    pub features: Var,
}

/// Parameter handles for a built model. The branches a variant does not
/// use are never registered, so checkpoints and update rules see only
/// live parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub inception: Option<InceptionBranchParams>,
    pub residual: Option<ResidualBranchParams>,
    pub attention: AttentionParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn build<S: Scalar>(
        config: ModelConfig,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelParams> {
        config.validate()?;
        let inception = if config.variant.uses_inception() {
            Some(InceptionBranchParams::register(store, &config, rng)?)
        } else {
            None
        };
        let residual = if config.variant.uses_residual() {
            Some(ResidualBranchParams::register(store, &config, rng)?)
        } else {
            None
        };
        let attention =
            AttentionParams::register(store, "attention", config.fused_channels(), rng)?;
        let head = HeadParams::register(
            store,
            "head",
            config.fused_channels(),
            config.num_classes,
            config.head_dropout,
            rng,
        )?;
        Ok(ModelParams { config, inception, residual, attention, head })
    }

    /// One pass over a batch. `rng` drives the dropout masks and is only
    /// consumed in training mode.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        input: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutput> {
        let shape = tape.shape(input).to_vec();
        let n = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != n || shape[3] != n {
            return Err(Error::dim(format!(
                "model input must be [batch, 1, {n}, {n}], got {shape:?}"
            )));
        }
        let with_aux = tape.mode() == Mode::Train;
        let mut branch_outputs = Vec::new();
        let mut aux_logits = Vec::new();
        if let Some(inception) = &self.inception {
            let (out, aux) = inception.forward(tape, store, input, rng, with_aux)?;
            branch_outputs.push(out);
            if let Some(a) = aux {
                aux_logits.push(a);
            }
        }
        if let Some(residual) = &self.residual {
            branch_outputs.push(residual.forward(tape, store, input)?);
        }
        let fused = match branch_outputs.len() {
            1 => branch_outputs[0],
            _ => tape.concat_channels(&branch_outputs)?,
        };
        let (attended, gates) = self.attention.forward(tape, store, fused)?;
        let (logits, features) = self.head.forward(tape, store, attended, rng)?;
        Ok(ModelOutput { logits, aux_logits, gates, features })
    }

    /// Total training loss: cross-entropy on the main logits plus
    /// `aux_weight` times the cross-entropy of each auxiliary head.
    pub fn loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        output: &ModelOutput,
        labels: &[usize],
        aux_weight: f64,
    ) -> Result<Var> {
        let mut total = tape.cross_entropy(output.logits, labels)?;
        for &aux in &output.aux_logits {
            let aux_ce = tape.cross_entropy(aux, labels)?;
            let scaled = tape.scale(aux_ce, S::from_f64(aux_weight));
            total = tape.add(total, scaled)?;
        }
        Ok(total)
    }
}

/// Finite-difference step for the end-to-end check. ReLU and max-pool
/// kinks are captured with probability proportional to the step, and a
/// captured kink's error does not shrink with it, so the step is tiny.
/// Rounding noise in the two loss evaluations is strongly correlated
/// and cancels in the difference, which keeps such a small step usable.
pub const COMPOSED_CHECK_STEP: f64 = 3e-7;
/// Pass threshold for the end-to-end check (the per-primitive checks
/// hold a tighter 1e-4).
pub const COMPOSED_CHECK_TOL: f64 = 1e-3;

/// End-to-end gradient verification: build the model in f64, run a
/// training-mode forward (batch statistics, dropout masks replayed from
/// a fixed seed, aux losses active) and compare every analytic gradient
/// against central finite differences, probing `per_param` elements of
/// each parameter tensor (0 probes all of them).
pub fn composed_gradient_check(
    config: &ModelConfig,
    seed: u64,
    per_param: usize,
) -> Result<GradCheckReport> {
    composed_gradient_check_with_fault(config, seed, per_param, None)
}

/// Same check with an optional corrupted backward rule, for demonstrating
/// that a broken gradient is actually caught.
pub fn composed_gradient_check_with_fault(
    config: &ModelConfig,
    seed: u64,
    per_param: usize,
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut init_rng = rng_for(seed, stream::INIT, 0);
    let model = ModelParams::build(config.clone(), &mut store, &mut init_rng)?;
    // Move every parameter off its init point: zero-initialized biases
    // sit exactly on the ReLU kink, where a dead path has a correct
    // analytic gradient of zero but a one-sided numeric one.
    let mut jitter = rng_for(seed, stream::INIT, 1);
    for key in store.trainable_keys() {
        for v in store.tensor_mut(key).data_mut() {
            *v += jitter.random_range(-0.05..0.05);
        }
    }

    let batch = 4;
    let size = config.input_size;
    let mut data_rng = rng_for(seed, stream::SYNTH, 0);
    let data: Vec<f64> =
        (0..batch * size * size).map(|_| data_rng.random_range(0.0..1.0)).collect();
    let input = Tensor::new(vec![batch, 1, size, size], data)?;
    let labels: Vec<usize> = (0..batch).map(|i| (i * 3 + 1) % config.num_classes).collect();
    let mask_seed = derive(seed, stream::DROPOUT, 99);

    finite_diff_check(
        &mut store,
        |store| {
            let mut tape: Tape<f64> = Tape::new(Mode::Train);
            if let Some(f) = fault {
                tape.inject_backward_fault(f);
            }
            let x = tape.leaf(input.clone());
            let mut drop_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let out = model.forward(&mut tape, store, x, &mut drop_rng)?;
            let loss = model.loss(&mut tape, &out, &labels, AUX_LOSS_WEIGHT)?;
            Ok((tape, loss))
        },
        COMPOSED_CHECK_STEP,
        per_param,
    )
}
