//! Task metrics: AUC for classification, RMSE for regression.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A named metric value with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub sample_count: usize,
    /// Per-seed values when the report aggregates several runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<f64>,
}

/// Exact Mann–Whitney AUC: the probability that a random positive
/// outscores a random negative, ties counting half. Pairwise O(n²),
/// which removes any ROC interpolation ambiguity at this scale.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores contain NaN or infinity".into()));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1.0 {
            positives.push(s);
        } else if l == 0.0 {
            negatives.push(s);
        } else {
            return Err(Error::Invalid(format!("label {l} is not 0 or 1")));
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Invalid("AUC needs both classes present".into()));
    }
    let mut wins = 0.0;
    for &p in &positives {
        for &n in &negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positives.len() as f64 * negatives.len() as f64))
}

/// Root mean squared error.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("RMSE of an empty set".into()));
    }
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}
