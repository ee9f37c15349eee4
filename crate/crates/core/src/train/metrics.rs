//! Per-epoch training metrics and their CSV form.

use crate::error::{Error, Result};

/// Column order for the metrics file. Wall-clock time is tracked on the
/// record for reporting but deliberately kept out of the CSV so identical
/// runs produce byte-identical files.
pub const CSV_HEADER: &str = "epoch,train_loss,train_accuracy,eval_loss,eval_accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Seconds spent on this epoch (training plus evaluation). Not serialized.
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.train_accuracy, self.eval_loss, self.eval_accuracy
        )
    }
}

/// Render a full metrics file: header, one row per record, trailing newline.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for record in records {
        out.push_str(&record.csv_row());
        out.push('\n');
    }
    out
}

/// Sanity checks applied before a metrics file is written: epochs strictly
/// increasing, accuracies inside [0, 1], losses finite.
pub fn validate_series(records: &[MetricsRecord]) -> Result<()> {
    let mut last_epoch = 0usize;
    for record in records {
        if record.epoch <= last_epoch {
            return Err(Error::usage(format!(
                "metrics epochs must increase: {} after {}",
                record.epoch, last_epoch
            )));
        }
        last_epoch = record.epoch;
        for (name, value) in
            [("train_accuracy", record.train_accuracy), ("eval_accuracy", record.eval_accuracy)]
        {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::usage(format!(
                    "epoch {}: {name} {value} outside [0, 1]",
                    record.epoch
                )));
            }
        }
        for (name, value) in [("train_loss", record.train_loss), ("eval_loss", record.eval_loss)] {
            if !value.is_finite() {
                return Err(Error::usage(format!("epoch {}: {name} is not finite", record.epoch)));
            }
        }
    }
    Ok(())
}
