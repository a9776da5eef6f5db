//! Classification metrics on predicted class probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ECE_BINS: usize = 15;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_of(scores: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(scores.row(i)) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn check(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() {
        return Err(Error::Shape {
            context: "evaluate",
            expected: vec![labels.len(), probs.row_len()],
            actual: probs.shape().to_vec(),
        });
    }
    let k = probs.row_len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    for i in 0..probs.rows() {
        let sum: f64 = probs.row(i).iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE
            || probs.row(i).iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::NotNormalized { row: i, sum });
        }
    }
    Ok(())
}

/// Accuracy, mean negative log-likelihood and 15-bin ECE.
pub fn evaluate(probs: &Tensor, labels: &[usize]) -> Result<Metrics> {
    evaluate_with_bins(probs, labels, ECE_BINS)
}

pub fn evaluate_with_bins(probs: &Tensor, labels: &[usize], bins: usize) -> Result<Metrics> {
    check(probs, labels)?;
    let n = labels.len().max(1) as f64;
    let nll = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.row(i)[y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n;
    Ok(Metrics {
        accuracy: accuracy_of(probs, labels),
        nll: nll.max(0.0),
        ece: ece_with_bins(probs, labels, bins)?,
    })
}

/// Expected calibration error over `bins` equal-width, right-closed bins of
/// the max probability: `Σ_b |B_b|/n · |acc(B_b) - conf(B_b)|`.
pub fn ece_with_bins(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    check(probs, labels)?;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let c = row[pred];
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        correct[b] += (pred == y) as usize;
        conf[b] += c;
    }
    let n = labels.len().max(1) as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] as f64 / m - conf[b] / m).abs()
        })
        .sum())
}
