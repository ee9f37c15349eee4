//! Channel attention over the fused feature map, and the classification
//! head that follows it.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::blocks::DenseParams;
use crate::model::config::{ATTENTION_REDUCTION, BN_EPS, BN_MOMENTUM};
use crate::params::{BnKeys, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

/// Squeeze-and-gate attention: global average pool to a channel
/// descriptor, squeeze through a bottleneck dense layer with batch norm
/// and ReLU, expand back to one non-negative gate per channel, then
/// rescale the feature map channel-wise.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub fc1: DenseParams,
    pub bn: BnKeys,
    pub fc2: DenseParams,
}

impl AttentionParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<AttentionParams> {
        let hidden = channels / ATTENTION_REDUCTION;
        let fc1 = DenseParams::register(store, &format!("{name}.fc1"), channels, hidden, rng)?;
        let bn = store.add_batchnorm(&format!("{name}.bn"), hidden)?;
        let fc2 = DenseParams::register(store, &format!("{name}.fc2"), hidden, channels, rng)?;
        Ok(AttentionParams { fc1, bn, fc2 })
    }

    /// Returns the rescaled feature map and the gates themselves.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        fused: Var,
    ) -> Result<(Var, Var)> {
        let descriptor = tape.global_avg_pool(fused)?;
        let z = self.fc1.forward(tape, store, descriptor)?;
        let z = tape.batch_norm(store, z, &self.bn, BN_EPS, BN_MOMENTUM)?;
        let z = tape.relu(z);
        let gates = self.fc2.forward(tape, store, z)?;
        let gates = tape.relu(gates);
        let out = tape.channel_scale(fused, gates)?;
        Ok((out, gates))
    }

    /// Force the gate to pass everything through unchanged: zero weights
    /// and unit bias on the expansion layer make every gate exactly 1.
    pub fn set_neutral<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for v in store.tensor_mut(self.fc2.weight).data_mut() {
            *v = S::zero();
        }
        for v in store.tensor_mut(self.fc2.bias).data_mut() {
            *v = S::one();
        }
    }

    /// Force every gate to exactly 0.
    pub fn set_zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for v in store.tensor_mut(self.fc2.weight).data_mut() {
            *v = S::zero();
        }
        for v in store.tensor_mut(self.fc2.bias).data_mut() {
            *v = S::zero();
        }
    }
}

/// Classification head: global average pool, dropout, dense to logits.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub fc: DenseParams,
    pub dropout: f64,
}

impl HeadParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        num_classes: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<HeadParams> {
        let fc = DenseParams::register(store, &format!("{name}.fc"), channels, num_classes, rng)?;
        Ok(HeadParams { fc, dropout })
    }

    /// Returns `(logits, pooled)`; the pooled vector is the per-sample
    /// feature embedding the classifier sees (before dropout).
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        attended: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let pooled = tape.global_avg_pool(attended)?;
        let dropped = tape.dropout(pooled, self.dropout, rng)?;
        let logits = self.fc.forward(tape, store, dropped)?;
        Ok((logits, pooled))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::{rng_for, stream};
    use crate::tensor::kernels;
    use crate::tensor::{Mode, Tensor};

    fn random_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Recompute the whole attention path with plain loops and dense
    /// kernel calls on a small map and compare element by element.
    #[test]
    fn attention_matches_scalar_recomputation() {
        let mut rng = rng_for(21, stream::INIT, 0);
        let mut store: ParamStore<f64> = ParamStore::new();
        let att = AttentionParams::register(&mut store, "a", 8, &mut rng).unwrap();
        // Non-trivial batch-norm affine and running stats so eval mode
        // exercises every term.
        store.tensor_mut(att.bn.gamma).data_mut()[0] = 1.3;
        store.tensor_mut(att.bn.beta).data_mut()[0] = -0.2;
        store.tensor_mut(att.bn.running_mean).data_mut()[0] = 0.1;
        store.tensor_mut(att.bn.running_var).data_mut()[0] = 0.7;

        let input = random_map(&mut rng, &[2, 8, 2, 2]);
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(input.clone());
        let (out, gates) = att.forward(&mut tape, &mut store, x).unwrap();
        assert_eq!(tape.shape(out), &[2, 8, 2, 2]);
        assert_eq!(tape.shape(gates), &[2, 8]);

        // Step 1: channel descriptor by explicit averaging.
        let mut s = vec![0.0f64; 2 * 8];
        for b in 0..2 {
            for c in 0..8 {
                let base = (b * 8 + c) * 4;
                s[b * 8 + c] = input.data()[base..base + 4].iter().sum::<f64>() / 4.0;
            }
        }
        // Step 2: squeeze, batch norm with running stats, ReLU.
        let z = kernels::dense_forward(
            &s,
            2,
            8,
            store.tensor(att.fc1.weight).data(),
            store.tensor(att.fc1.bias).data(),
            1,
        );
        let mean = store.tensor(att.bn.running_mean).data()[0];
        let var = store.tensor(att.bn.running_var).data()[0];
        let gamma = store.tensor(att.bn.gamma).data()[0];
        let beta = store.tensor(att.bn.beta).data()[0];
        let z: Vec<f64> = z
            .iter()
            .map(|v| (gamma * (v - mean) / (var + BN_EPS).sqrt() + beta).max(0.0))
            .collect();
        // Step 3: expand and clamp to non-negative gates.
        let w: Vec<f64> = kernels::dense_forward(
            &z,
            2,
            1,
            store.tensor(att.fc2.weight).data(),
            store.tensor(att.fc2.bias).data(),
            8,
        )
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
        for (got, expect) in tape.value(gates).data().iter().zip(&w) {
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
        // Step 4: channel-wise rescale.
        for b in 0..2 {
            for c in 0..8 {
                for p in 0..4 {
                    let idx = (b * 8 + c) * 4 + p;
                    let expect = input.data()[idx] * w[b * 8 + c];
                    let got = tape.value(out).data()[idx];
                    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn neutral_gate_reproduces_input_exactly() {
        let mut rng = rng_for(22, stream::INIT, 0);
        let mut store: ParamStore<f64> = ParamStore::new();
        let att = AttentionParams::register(&mut store, "a", 16, &mut rng).unwrap();
        att.set_neutral(&mut store);

        let input = random_map(&mut rng, &[3, 16, 4, 4]);
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(input.clone());
        let (out, gates) = att.forward(&mut tape, &mut store, x).unwrap();
        assert!(tape.value(gates).data().iter().all(|&g| g == 1.0));
        assert_eq!(tape.value(out).data(), input.data());
    }

    /// Zero gates must zero the output, and backward through the zeroed
    /// gate must still leave a path: gradient flows into the gate's own
    /// parameters through the channel descriptor even though the scaled
    /// map contributes nothing.
    #[test]
    fn zero_gate_zeroes_output_and_input_gradient() {
        let mut rng = rng_for(23, stream::INIT, 0);
        let mut store: ParamStore<f64> = ParamStore::new();
        let att = AttentionParams::register(&mut store, "a", 8, &mut rng).unwrap();
        att.set_zero(&mut store);

        let input = random_map(&mut rng, &[2, 8, 3, 3]);
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(input);
        let (out, gates) = att.forward(&mut tape, &mut store, x).unwrap();
        assert!(tape.value(gates).data().iter().all(|&g| g == 0.0));
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        let loss = tape.sum_all(out);
        tape.backward(loss, &mut store).unwrap();
        // d out / d input = gate = 0 on the direct path, and the gate
        // path is cut by ReLU at exactly 0, so the input gradient is 0.
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    /// Gates come out of a final ReLU, so they can never be negative,
    /// whatever the parameters and inputs.
    #[test]
    fn gates_are_never_negative() {
        for seed in 0..100 {
            let mut rng = rng_for(seed, stream::INIT, 7);
            let mut store: ParamStore<f64> = ParamStore::new();
            let att = AttentionParams::register(&mut store, "a", 8, &mut rng).unwrap();
            // Random affine terms push the pre-activation negative often.
            for v in store.tensor_mut(att.fc2.bias).data_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            let input = random_map(&mut rng, &[4, 8, 2, 2]);
            let mut tape: Tape<f64> = Tape::new(Mode::Eval);
            let x = tape.leaf(input);
            let (_, gates) = att.forward(&mut tape, &mut store, x).unwrap();
            assert!(tape.value(gates).data().iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn head_produces_logits_per_class() {
        let mut rng = rng_for(31, stream::INIT, 0);
        let mut store: ParamStore<f64> = ParamStore::new();
        let head = HeadParams::register(&mut store, "h", 16, 10, 0.5, &mut rng).unwrap();
        let input = random_map(&mut rng, &[2, 16, 4, 4]);
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.leaf(input);
        let mut drop_rng = rng_for(31, stream::DROPOUT, 0);
        let (logits, pooled) = head.forward(&mut tape, &store, x, &mut drop_rng).unwrap();
        assert_eq!(tape.shape(logits), &[2, 10]);
        assert_eq!(tape.shape(pooled), &[2, 16]);
    }
}
