//! Flat key-value run configuration.
//!
//! A run is described by one `key = value` per line (`#` starts a comment).
//! Unknown keys are rejected with the offending line number, so a typo never
//! silently falls back to a default. [`RunSpec::echo`] renders the fully
//! resolved configuration back into the same format; the echo is written
//! into every run directory and parses back to an identical spec.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

/// Everything a command needs to know, with all defaults materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Synthetic dataset shape, used when no dataset directory is given.
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub train_fraction: f64,
    /// Full preprocessing plus augmentation; `false` is the raw pipeline
    /// (grayscale, resize, scale only).
    pub preprocess: bool,
    pub dataset_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            model: ModelConfig::new(10, Variant::Ensemble),
            train: TrainConfig::default(),
            synthetic_classes: 10,
            synthetic_per_class: 100,
            train_fraction: 0.8,
            preprocess: true,
            dataset_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.synthetic_classes < 2 {
            return Err(Error::config("synthetic_classes must be at least 2"));
        }
        if self.synthetic_per_class < 2 {
            return Err(Error::config(
                "synthetic_per_class must be at least 2 so both splits are non-empty",
            ));
        }
        Ok(())
    }

    /// Render the resolved configuration; `parse_config(echo())` is identity.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("num_classes", self.model.num_classes.to_string());
        line("variant", self.model.variant.to_string());
        line("aux_dropout", self.model.aux_dropout.to_string());
        line("head_dropout", self.model.head_dropout.to_string());
        line("epochs", self.train.epochs.to_string());
        line("batch_size", self.train.batch_size.to_string());
        line("learning_rate", self.train.learning_rate.to_string());
        line("optimizer", self.train.optimizer.clone());
        line("momentum", self.train.momentum.to_string());
        line("weight_decay", self.train.weight_decay.to_string());
        line("aux_loss_weight", self.train.aux_loss_weight.to_string());
        line("seed", self.train.seed.to_string());
        line("synthetic_classes", self.synthetic_classes.to_string());
        line("synthetic_per_class", self.synthetic_per_class.to_string());
        line("train_fraction", self.train_fraction.to_string());
        line("preprocess", self.preprocess.to_string());
        if let Some(dir) = &self.dataset_dir {
            line("dataset_dir", dir.display().to_string());
        }
        line("out_dir", self.out_dir.display().to_string());
        out
    }

    /// Apply one `key = value` pair. `line_no` is for error messages.
    fn set(&mut self, key: &str, value: &str, line_no: usize) -> Result<()> {
        match key {
            "num_classes" => self.model.num_classes = parse_value(key, value, line_no)?,
            "variant" => self.model.variant = Variant::parse(value)?,
            "aux_dropout" => self.model.aux_dropout = parse_value(key, value, line_no)?,
            "head_dropout" => self.model.head_dropout = parse_value(key, value, line_no)?,
            "epochs" => self.train.epochs = parse_value(key, value, line_no)?,
            "batch_size" => self.train.batch_size = parse_value(key, value, line_no)?,
            "learning_rate" => self.train.learning_rate = parse_value(key, value, line_no)?,
            "optimizer" => self.train.optimizer = value.to_string(),
            "momentum" => self.train.momentum = parse_value(key, value, line_no)?,
            "weight_decay" => self.train.weight_decay = parse_value(key, value, line_no)?,
            "aux_loss_weight" => self.train.aux_loss_weight = parse_value(key, value, line_no)?,
            "seed" => self.train.seed = parse_value(key, value, line_no)?,
            "synthetic_classes" => self.synthetic_classes = parse_value(key, value, line_no)?,
            "synthetic_per_class" => self.synthetic_per_class = parse_value(key, value, line_no)?,
            "train_fraction" => self.train_fraction = parse_value(key, value, line_no)?,
            "preprocess" => self.preprocess = parse_value(key, value, line_no)?,
            "dataset_dir" => self.dataset_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::config(format!("unknown key `{other}` at line {line_no}")))
            }
        }
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line_no: usize) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!("bad value `{value}` for `{key}` at line {line_no}"))
    })
}

/// Parse a config file body on top of the defaults. Later lines override
/// earlier ones; command-line flags are applied by the caller afterwards
/// and therefore override the file.
pub fn parse_config(text: &str) -> Result<RunSpec> {
    let mut spec = RunSpec::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("expected `key = value` at line {line_no}, got `{line}`"))
        })?;
        spec.set(key.trim(), value.trim(), line_no)?;
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_the_documented_defaults() {
        let spec = parse_config("").unwrap();
        assert_eq!(spec, RunSpec::default());
        assert_eq!(spec.model.num_classes, 10);
        assert_eq!(spec.train.learning_rate, 0.01);
        assert_eq!(spec.train.epochs, 30);
        assert!(spec.preprocess);
    }

    #[test]
    fn keys_comments_and_blank_lines_parse() {
        let text = "\n# a comment\nbatch_size = 16\nseed = 7   # trailing comment\n\nvariant = residual\n";
        let spec = parse_config(text).unwrap();
        assert_eq!(spec.train.batch_size, 16);
        assert_eq!(spec.train.seed, 7);
        assert_eq!(spec.model.variant, Variant::Residual);
    }

    #[test]
    fn misspelled_key_is_named_with_its_line() {
        let err = parse_config("seed = 1\nlearnig_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("learnig_rate"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn type_mismatch_is_named_with_its_line() {
        let err = parse_config("batch_size = fast").unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn constraint_violations_surface_after_parsing() {
        assert!(parse_config("aux_loss_weight = 1.5").is_err());
        assert!(parse_config("train_fraction = 1").is_err());
        assert!(parse_config("optimizer = adam").is_err());
        assert!(parse_config("num_classes = 1").is_err());
    }

    #[test]
    fn later_lines_override_earlier_ones() {
        let spec = parse_config("seed = 1\nseed = 2\n").unwrap();
        assert_eq!(spec.train.seed, 2);
    }

    #[test]
    fn echo_round_trips() {
        let mut spec = RunSpec::default();
        spec.train.seed = 31;
        spec.train.learning_rate = 0.005;
        spec.model.variant = Variant::Inception;
        spec.preprocess = false;
        spec.dataset_dir = Some(PathBuf::from("data/glyphs"));
        spec.out_dir = PathBuf::from("out/x");
        let parsed = parse_config(&spec.echo()).unwrap();
        assert_eq!(parsed, spec);
    }
}
