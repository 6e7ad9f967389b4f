use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target lines for detection and false-positive rates.
pub const TARGET_DETECTION: f64 = 0.90;
pub const TARGET_FALSE_POSITIVE: f64 = 0.20;

/// Confusion counts with AFib (label 1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Metrics {
    pub fn from_predictions(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::LengthMismatch { expected: labels.len(), actual: predictions.len() });
        }
        let mut m = Self::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (l, p) {
                (1, 1) => m.tp += 1,
                (1, 0) => m.fn_ += 1,
                (0, 1) => m.fp += 1,
                (0, 0) => m.tn += 1,
                _ => return Err(Error::Input(format!("labels must be 0 or 1, got label {l} prediction {p}"))),
            }
        }
        Ok(m)
    }

    /// TP / (TP + FN); 0 without AFib records.
    pub fn afib_detection_rate(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// FP / (FP + TN); 0 without sinus records.
    pub fn false_positive_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn meets_target(&self) -> bool {
        self.afib_detection_rate() >= TARGET_DETECTION && self.false_positive_rate() <= TARGET_FALSE_POSITIVE
    }

    /// Detection minus false-positive rate; the early-stopping score.
    pub fn score(&self) -> f64 {
        self.afib_detection_rate() - self.false_positive_rate()
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test: Metrics,
}

pub fn write_history<W: Write>(history: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "detection_rate", "fp_rate", "train_loss", "target_detection", "target_fp"])?;
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            e.test.afib_detection_rate().to_string(),
            e.test.false_positive_rate().to_string(),
            e.train_loss.to_string(),
            TARGET_DETECTION.to_string(),
            TARGET_FALSE_POSITIVE.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
