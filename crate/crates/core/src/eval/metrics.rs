use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
    /// True-label count per class.
    pub support: Vec<usize>,
}

/// Macro-averaged F1 over all `num_classes` classes. A class with
/// precision + recall = 0 (including one never seen nor predicted) scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<F1Scores> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "macro_f1",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    if num_classes == 0 {
        return Err(Error::config("num_classes", "must be >= 1"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        for v in [p, y] {
            if v >= num_classes {
                return Err(Error::Label { index: i, label: v, num_classes });
            }
        }
        predicted[p] += 1;
        support[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| {
            let precision = if predicted[c] == 0 { 0.0 } else { tp[c] as f64 / predicted[c] as f64 };
            let recall = if support[c] == 0 { 0.0 } else { tp[c] as f64 / support[c] as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok(F1Scores { macro_f1, per_class, support })
}
