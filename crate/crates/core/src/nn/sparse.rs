//! Compressed-row kernels for dense layers under a sparse mask.
//!
//! Only entries the mask keeps are stored, so forward and backward cost
//! scales with the kept count rather than `fan_in * fan_out`. Kept entries
//! whose weight happens to be zero are still stored and still receive a
//! gradient.

use super::layer::ParamGrad;
use crate::tensor::Tensor;

/// Masks at or below this density run through the sparse kernels.
pub const SPARSE_MAX_DENSITY: f64 = 0.08;

/// Kept entries of a masked `[fan_in, fan_out]` weight, grouped by input
/// row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeight {
    fan_in: usize,
    fan_out: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl SparseWeight {
    /// `weight` is `[fan_in, fan_out]` row-major and `bits` its mask.
    pub fn from_masked(weight: &Tensor, bits: &[u8]) -> Self {
        let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
        debug_assert_eq!(bits.len(), fan_in * fan_out);
        let mut row_start = Vec::with_capacity(fan_in + 1);
        let mut cols = Vec::new();
        let mut values = Vec::new();
        row_start.push(0);
        for (w, b) in weight
            .data()
            .chunks_exact(fan_out)
            .zip(bits.chunks_exact(fan_out))
        {
            for (j, (&v, &keep)) in w.iter().zip(b).enumerate() {
                if keep != 0 {
                    cols.push(j);
                    values.push(v);
                }
            }
            row_start.push(cols.len());
        }
        Self {
            fan_in,
            fan_out,
            row_start,
            cols,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_start[i]..self.row_start[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `x W + b` for `x` of shape `[batch, fan_in]`.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Tensor {
        self.forward_t(&feature_major(x), bias)
    }

    /// [`forward`](Self::forward) from the `[fan_in, batch]` layout.
    pub fn forward_t(&self, x_t: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let batch = x_t.shape()[1];
        let mut out_t = vec![0.0; self.fan_out * batch];
        if let Some(b) = bias {
            for (dst, &v) in out_t.chunks_exact_mut(batch).zip(b.data()) {
                dst.fill(v);
            }
        }
        for (i, x) in x_t.data().chunks_exact(batch).enumerate() {
            for (j, v) in self.row(i) {
                axpy(v, x, &mut out_t[j * batch..(j + 1) * batch]);
            }
        }
        let out = transpose(&out_t, self.fan_out, batch);
        Tensor::new(vec![batch, self.fan_out], out).expect("sparse dense output shape")
    }

    /// Gradients for the kept weights (zero elsewhere), the bias when
    /// `has_bias`, and the input when requested.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        has_bias: bool,
        want_input_grad: bool,
    ) -> (ParamGrad, Option<Tensor>) {
        self.backward_t(&feature_major(x), grad_out, has_bias, want_input_grad)
    }

    /// [`backward`](Self::backward) from the `[fan_in, batch]` input layout.
    pub fn backward_t(
        &self,
        x_t: &Tensor,
        grad_out: &Tensor,
        has_bias: bool,
        want_input_grad: bool,
    ) -> (ParamGrad, Option<Tensor>) {
        let batch = x_t.shape()[1];
        let g_t = transpose(grad_out.data(), batch, self.fan_out);
        let mut gw = vec![0.0; self.fan_in * self.fan_out];
        let mut gx_t = want_input_grad.then(|| vec![0.0; self.fan_in * batch]);
        for (i, x) in x_t.data().chunks_exact(batch).enumerate() {
            let gw_row = &mut gw[i * self.fan_out..(i + 1) * self.fan_out];
            for (j, _) in self.row(i) {
                gw_row[j] = dot(x, &g_t[j * batch..(j + 1) * batch]);
            }
            if let Some(gx_t) = gx_t.as_mut() {
                let dst = &mut gx_t[i * batch..(i + 1) * batch];
                for (j, v) in self.row(i) {
                    axpy(v, &g_t[j * batch..(j + 1) * batch], dst);
                }
            }
        }
        let bias = has_bias.then(|| {
            let mut gb = vec![0.0; self.fan_out];
            for row in grad_out.data().chunks_exact(self.fan_out) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            Tensor::new(vec![self.fan_out], gb).expect("bias grad")
        });
        let gx = gx_t.map(|d| {
            Tensor::new(vec![batch, self.fan_in], transpose(&d, self.fan_in, batch))
                .expect("sparse input grad")
        });
        let weight = Tensor::new(vec![self.fan_in, self.fan_out], gw).expect("sparse weight grad");
        (ParamGrad { weight, bias }, gx)
    }
}

/// `[batch, n]` to the `[n, batch]` layout the sparse kernels consume.
pub fn feature_major(x: &Tensor) -> Tensor {
    let (batch, n) = (x.rows(), x.row_len());
    Tensor::new(vec![n, batch], transpose(x.data(), batch, n)).expect("transposed input")
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    const TILE: usize = 16;
    let mut out = vec![0.0; rows * cols];
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                let src = &data[r * cols..(r + 1) * cols];
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = src[c];
                }
            }
        }
    }
    out
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight fixed partial sums, so the reduction order does
/// not depend on the platform.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
