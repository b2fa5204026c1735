//! Scalar losses returning `(value, d value / d pred)`.

use crate::error::{NetError, Result};

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NetError::Shape(format!(
            "loss over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred, target)?;
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            total += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((total / n, grad))
}

/// Mean absolute percentage error as a fraction (not percent). The
/// subgradient at `pred == target` is 0.
pub fn mape_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred, target)?;
    if let Some(bad) = target.iter().find(|t| !(**t > 0.0)) {
        return Err(NetError::Contract(format!(
            "mape needs positive targets, got {bad}"
        )));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, a)| {
            total += (a - p).abs() / a;
            let sign = if p > a {
                1.0
            } else if p < a {
                -1.0
            } else {
                0.0
            };
            sign / (a * n)
        })
        .collect();
    Ok((total / n, grad))
}
