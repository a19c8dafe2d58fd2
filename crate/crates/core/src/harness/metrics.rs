//! Pooled accuracy and F1 over LOSO predictions.

use serde::{Deserialize, Serialize};

use super::config::F1Mode;
use super::train::Prediction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub f1_mode: F1Mode,
    pub per_class_f1: Vec<f64>,
    /// Classes whose F1 has a zero denominator (no true and no predicted
    /// samples); their F1 counts as 0 in the macro average.
    pub undefined_f1_classes: Vec<usize>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

pub fn confusion_matrix(predictions: &[Prediction], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for p in predictions {
        if p.label >= num_classes || p.predicted >= num_classes {
            return Err(Error::Config(format!(
                "prediction ({}, {}) outside {num_classes} classes",
                p.label, p.predicted
            )));
        }
        m[p.label][p.predicted] += 1;
    }
    Ok(m)
}

/// Metrics over all predictions pooled together.
pub fn compute_metrics(predictions: &[Prediction], num_classes: usize, mode: F1Mode) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let confusion = confusion_matrix(predictions, num_classes)?;
    let n = predictions.len();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut per_class_f1 = Vec::with_capacity(num_classes);
    let mut undefined_f1_classes = Vec::new();
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let denom = actual + predicted;
        if denom == 0 {
            undefined_f1_classes.push(c);
            per_class_f1.push(0.0);
        } else {
            per_class_f1.push(2.0 * tp as f64 / denom as f64);
        }
    }
    let accuracy = correct as f64 / n as f64;
    let f1 = match mode {
        F1Mode::Macro => per_class_f1.iter().sum::<f64>() / num_classes as f64,
        // Pooled TP/FP/FN over single-label predictions reduce to accuracy.
        F1Mode::Micro => accuracy,
    };
    Ok(Metrics {
        accuracy,
        f1,
        f1_mode: mode,
        per_class_f1,
        undefined_f1_classes,
        confusion,
        count: n,
    })
}
