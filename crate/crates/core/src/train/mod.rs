//! Training loop, evaluation, and the three-variant comparison run.
//!
//! Determinism contract: every random choice is derived from
//! `(seed, stream, index)`, never from global state, so a `(seed, config,
//! dataset)` triple maps to bit-identical metrics across runs and a resumed
//! run replays exactly the stream a fresh run would have used.

pub mod checkpoint;
pub mod metrics;
pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;

pub use checkpoint::{Checkpoint, NamedTensor, VelocitySlot};
pub use metrics::{to_csv, validate_series, MetricsRecord, CSV_HEADER};
pub use optim::Sgd;

use crate::error::{Error, Result};
use crate::image::dataset::LoadedDataset;
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::params::ParamStore;
use crate::rng::{rng_for, stream};
use crate::tensor::{Mode, Tape, Tensor};

/// Optimization schedule. The model shape (including the branch variant)
/// lives in [`ModelConfig`]; this holds everything else a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Update rule name; only "sgd" is implemented.
    pub optimizer: String,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aux_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: "sgd".to_string(),
            momentum: 0.9,
            weight_decay: 1e-4,
            aux_loss_weight: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch size must be at least 2 (batch-norm needs more than one sample)",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.optimizer != "sgd" {
            return Err(Error::config(format!(
                "unknown optimizer `{}`; only `sgd` is implemented",
                self.optimizer
            )));
        }
        if !(0.0..=1.0).contains(&self.aux_loss_weight) {
            return Err(Error::config(format!(
                "aux loss weight must be in [0, 1], got {}",
                self.aux_loss_weight
            )));
        }
        Ok(())
    }
}

/// A model, its parameters, and an optimizer, advancing one epoch at a time.
pub struct Trainer {
    pub model: ModelParams,
    pub store: ParamStore<f32>,
    pub optimizer: Sgd<f32>,
    pub config: TrainConfig,
    completed_epochs: u32,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init_rng = rng_for(config.seed, stream::INIT, 0);
        let model = ModelParams::build(model_config, &mut store, &mut init_rng)?;
        let optimizer =
            Sgd::new(&store, config.learning_rate, config.momentum, config.weight_decay);
        Ok(Trainer { model, store, optimizer, config, completed_epochs: 0 })
    }

    /// Epochs finished so far (also the next metrics row's epoch minus one).
    pub fn completed_epochs(&self) -> u32 {
        self.completed_epochs
    }

    /// One pass over the shuffled training split: forward in train mode,
    /// total loss, backward, optimizer step. Returns (mean loss, accuracy)
    /// over the samples actually trained on. Trailing chunks of fewer than
    /// two samples are skipped because batch norm cannot normalize them.
    pub fn run_epoch(&mut self, data: &LoadedDataset) -> Result<(f64, f64)> {
        if data.train_indices.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        let epoch = self.completed_epochs as u64;
        let mut order = data.train_indices.clone();
        order.shuffle(&mut rng_for(self.config.seed, stream::EPOCH, epoch));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new(Mode::Train);
            let input = tape.leaf(self.batch_input(data, chunk)?);
            let mut drop_rng =
                rng_for(self.config.seed, stream::DROPOUT, (epoch << 32) | batch_idx as u64);
            let output = self.model.forward(&mut tape, &mut self.store, input, &mut drop_rng)?;
            let loss =
                self.model.loss(&mut tape, &output, &labels, self.config.aux_loss_weight)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss ({loss_value}) in epoch {} batch {batch_idx}",
                    epoch + 1
                )));
            }
            correct += count_correct(tape.value(output.logits), &labels);
            loss_sum += loss_value * chunk.len() as f64;
            seen += chunk.len();

            self.store.zero_grads();
            tape.backward(loss, &mut self.store)?;
            self.optimizer.step(&mut self.store)?;
        }
        self.completed_epochs += 1;
        Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
    }

    /// Mean cross-entropy and argmax accuracy over the evaluation split,
    /// in eval mode (dropout off, batch norm on running statistics, no
    /// auxiliary heads).
    pub fn evaluate(&mut self, data: &LoadedDataset) -> Result<(f64, f64)> {
        self.evaluate_indices(data, &data.test_indices)
    }

    fn evaluate_indices(&mut self, data: &LoadedDataset, indices: &[usize]) -> Result<(f64, f64)> {
        if indices.is_empty() {
            return Err(Error::config("evaluation split is empty"));
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in indices.chunks(self.config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new(Mode::Eval);
            let input = tape.leaf(self.batch_input(data, chunk)?);
            // Eval mode never draws from this.
            let mut drop_rng = rng_for(self.config.seed, stream::DROPOUT, u64::MAX);
            let output = self.model.forward(&mut tape, &mut self.store, input, &mut drop_rng)?;
            let loss = tape.cross_entropy(output.logits, &labels)?;
            loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            correct += count_correct(tape.value(output.logits), &labels);
        }
        Ok((loss_sum / indices.len() as f64, correct as f64 / indices.len() as f64))
    }

    /// Train until `config.epochs` epochs are complete, evaluating after
    /// each one. `on_epoch` fires per record for progress reporting.
    pub fn train(
        &mut self,
        data: &LoadedDataset,
        mut on_epoch: impl FnMut(&MetricsRecord),
    ) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while (self.completed_epochs as usize) < self.config.epochs {
            let started = Instant::now();
            let (train_loss, train_accuracy) = self.run_epoch(data)?;
            let (eval_loss, eval_accuracy) = self.evaluate(data)?;
            let record = MetricsRecord {
                epoch: self.completed_epochs as usize,
                train_loss,
                train_accuracy,
                eval_loss,
                eval_accuracy,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&record);
            records.push(record);
        }
        Ok(records)
    }

    pub fn capture_checkpoint(&self, config_echo: &str) -> Checkpoint {
        Checkpoint::capture(
            &self.store,
            &self.optimizer,
            config_echo,
            self.completed_epochs,
            self.config.seed,
        )
    }

    /// Rebuild a trainer from a checkpoint. The checkpoint's seed and epoch
    /// counter win over `config`, so the resumed run draws exactly the
    /// streams the original would have.
    pub fn resume(
        model_config: ModelConfig,
        mut config: TrainConfig,
        snapshot: &Checkpoint,
    ) -> Result<Trainer> {
        config.seed = snapshot.seed;
        let mut trainer = Trainer::new(model_config, config)?;
        snapshot.restore(&mut trainer.store, &mut trainer.optimizer)?;
        trainer.completed_epochs = snapshot.epoch;
        Ok(trainer)
    }

    fn batch_input(&self, data: &LoadedDataset, chunk: &[usize]) -> Result<Tensor<f32>> {
        let side = self.model.config.input_size;
        let pixels = side * side;
        let mut flat = Vec::with_capacity(chunk.len() * pixels);
        for &i in chunk {
            let sample = &data.inputs[i];
            if sample.len() != pixels {
                return Err(Error::data(format!(
                    "sample {i} has {} pixels, expected {side}x{side}",
                    sample.len()
                )));
            }
            flat.extend_from_slice(sample);
        }
        Tensor::new(vec![chunk.len(), 1, side, side], flat)
    }
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(row, &label)| {
            let scores = &logits.data()[row * classes..(row + 1) * classes];
            let mut best = 0;
            for (j, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// One trained variant's results in the comparison run.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub trainable_scalars: usize,
    pub records: Vec<MetricsRecord>,
}

impl AblationRow {
    pub fn final_eval_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.eval_accuracy)
    }
}

/// Train the two single branches and the ensemble under the same seed and
/// budget, so the only difference between rows is the architecture.
pub fn run_ablation(
    data: &LoadedDataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_epoch: impl FnMut(Variant, &MetricsRecord),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in [Variant::Inception, Variant::Residual, Variant::Ensemble] {
        let mut trainer =
            Trainer::new(model_config.clone().with_variant(variant), train_config.clone())?;
        let trainable_scalars = trainer.store.num_trainable_scalars();
        let records = trainer.train(data, |r| on_epoch(variant, r))?;
        rows.push(AblationRow { variant, trainable_scalars, records });
    }
    Ok(rows)
}

/// Fixed-width text table over the ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant     params     eval_accuracy\n");
    for row in rows {
        out.push_str(&format!(
            "{:<11} {:<10} {:.4}\n",
            row.variant.to_string(),
            row.trainable_scalars,
            row.final_eval_accuracy()
        ));
    }
    out
}
