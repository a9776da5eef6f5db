use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax, max-shifted for stability.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy_softmax(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let batch = logits.rows();
    let k = logits.row_len();
    if labels.len() != batch {
        return Err(Error::Shape {
            context: "cross_entropy labels",
            expected: vec![batch],
            actual: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = softmax(logits);
    for (i, (&label, g)) in labels
        .iter()
        .zip(grad.data_mut().chunks_exact_mut(k))
        .enumerate()
    {
        let row = logits.row(i);
        loss += log_sum_exp(row) - row[label];
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss"));
    }
    Ok((loss.max(0.0), grad))
}
