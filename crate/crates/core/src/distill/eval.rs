use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Element;

/// Top-1 accuracy with a per-class breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub samples: usize,
}

impl EvalReport {
    pub fn from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("evaluation on an empty dataset".into()));
        }
        let mut correct = vec![0usize; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (&p, &l) in preds.iter().zip(labels) {
            counts[l] += 1;
            if p == l {
                correct[l] += 1;
            }
        }
        let total: usize = correct.iter().sum();
        Ok(Self {
            top1: total as f64 / labels.len() as f64,
            per_class: correct
                .iter()
                .zip(&counts)
                .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect(),
            class_counts: counts,
            samples: labels.len(),
        })
    }

    /// Count-weighted mean of the per-class accuracies.
    pub fn weighted_class_mean(&self) -> f64 {
        let s: f64 = self
            .per_class
            .iter()
            .zip(&self.class_counts)
            .map(|(a, &n)| a * n as f64)
            .sum();
        s / self.samples as f64
    }
}

/// Eval-mode argmax accuracy on a labeled dataset.
pub fn evaluate<E: Element>(model: &Model<E>, data: &Dataset) -> Result<EvalReport> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Data("evaluation needs a labeled dataset".into()))?;
    if data.is_empty() {
        return Err(Error::Data("evaluation on an empty dataset".into()));
    }
    let logits = model.predict(&data.all_images::<E>())?;
    EvalReport::from_predictions(&logits.argmax_rows(), labels, model.arch().num_classes)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_weighted_mean_equals_top1() {
        let r = EvalReport::from_predictions(&[0, 1, 1, 2, 2, 0], &[0, 1, 2, 2, 2, 1], 3).unwrap();
        assert!((r.top1 - 4.0 / 6.0).abs() < 1e-15);
        assert!((r.weighted_class_mean() - r.top1).abs() < 1e-15);
        assert!(EvalReport::from_predictions(&[], &[], 3).is_err());
    }

    #[test]
    fn memorized_predictions_are_perfect() {
        let r = EvalReport::from_predictions(&[2, 0, 1], &[2, 0, 1], 3).unwrap();
        assert_eq!(r.top1, 1.0);
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
