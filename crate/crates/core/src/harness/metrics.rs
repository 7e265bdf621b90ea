//! Evaluation metrics and fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labels below this are excluded from evaluation MAPE (the denominator
/// reaches zero at end of life). Recorded in every report.
pub const MAPE_EXCLUSION_THRESHOLD: f64 = 0.01;

fn check_inputs(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() || labels.is_empty() {
        return Err(Error::InvalidArgument("metric over empty input".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "metric over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn metric_mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(preds, labels)?;
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

pub fn metric_mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(preds, labels)?;
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / preds.len() as f64)
}

/// Mean absolute percentage error in percent (a perfect tenth of the label
/// away scores 10.0). Points with `label < MAPE_EXCLUSION_THRESHOLD` are
/// excluded; if every point is excluded the result is 0 and the caller can
/// see the exclusion count via [`mape_excluded_count`].
pub fn metric_mape(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, y) in preds.iter().zip(labels) {
        if *y < MAPE_EXCLUSION_THRESHOLD {
            continue;
        }
        total += (p - y).abs() / y;
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * total / n as f64)
}

pub fn mape_excluded_count(labels: &[f64]) -> usize {
    labels
        .iter()
        .filter(|y| **y < MAPE_EXCLUSION_THRESHOLD)
        .count()
}

/// Mean and sample standard deviation (ddof = 1) across folds, the
/// "m ± s" convention of the summary table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("aggregate over empty input".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}
