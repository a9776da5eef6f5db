use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, MatRef, Tensor};

/// Declarative layer description used to build a [`Network`](super::Network).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// Unfolds one image `[C, H, W]` into `[C*k*k, out_h*out_w]`.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let k = self.kernel;
        let area = self.out_area();
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &mut cols[r * area..(r + 1) * area];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            row[oy * self.out_w + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w
                            {
                                image[(c * self.in_h + iy as usize) * self.in_w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let k = self.kernel;
        let area = self.out_area();
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &cols[r * area..(r + 1) * area];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.in_w {
                                continue;
                            }
                            image[(c * self.in_h + iy as usize) * self.in_w + ix as usize] +=
                                row[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = x W + b` with `W` stored `[input, output]`.
    Dense {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    /// Weight `[out_ch, in_ch, k, k]`, bias `[out_ch]`.
    Conv2d {
        geometry: ConvGeometry,
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Relu,
    Flatten,
}

/// Gradient of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub(crate) fn uniform_init(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

impl Layer {
    /// Builds a layer for per-sample input shape `input`, returning it with its
    /// per-sample output shape. Weights follow the usual fan-in uniform rule,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, for both weights and biases.
    pub(crate) fn build(
        spec: LayerSpec,
        input: &[usize],
        rng: &mut Rng,
    ) -> Result<(Layer, Vec<usize>)> {
        match spec {
            LayerSpec::Dense {
                input: fan_in,
                output,
                bias,
            } => {
                if input != [fan_in] {
                    return Err(Error::Shape {
                        context: "Dense input",
                        expected: vec![fan_in],
                        actual: input.to_vec(),
                    });
                }
                if output == 0 {
                    return Err(Error::invalid("Dense output width must be positive"));
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = uniform_init(&[fan_in, output], bound, rng);
                let bias = bias.then(|| uniform_init(&[output], bound, rng));
                Ok((Layer::Dense { weight, bias }, vec![output]))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return Err(Error::Shape {
                        context: "Conv2d input (expects [C, H, W])",
                        expected: vec![in_channels, 0, 0],
                        actual: input.to_vec(),
                    });
                };
                if c != in_channels {
                    return Err(Error::Shape {
                        context: "Conv2d input channels",
                        expected: vec![in_channels, h, w],
                        actual: input.to_vec(),
                    });
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(Error::invalid(
                        "Conv2d kernel, stride and channels must be positive",
                    ));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::invalid(format!(
                        "Conv2d kernel {kernel} larger than padded input {h}x{w} (+{padding})"
                    )));
                }
                let out_h = (h + 2 * padding - kernel) / stride + 1;
                let out_w = (w + 2 * padding - kernel) / stride + 1;
                let geometry = ConvGeometry {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    in_h: h,
                    in_w: w,
                    out_h,
                    out_w,
                };
                let bound = 1.0 / (geometry.patch_len() as f64).sqrt();
                let weight = uniform_init(&[out_channels, in_channels, kernel, kernel], bound, rng);
                let bias = Some(uniform_init(&[out_channels], bound, rng));
                Ok((
                    Layer::Conv2d {
                        geometry,
                        weight,
                        bias,
                    },
                    vec![out_channels, out_h, out_w],
                ))
            }
            LayerSpec::Relu => Ok((Layer::Relu, input.to_vec())),
            LayerSpec::Flatten => Ok((Layer::Flatten, vec![input.iter().product()])),
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_mut(),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.weight().is_some()
    }

    /// Forward pass over a batch. `weight` overrides the stored weight (used
    /// for masked weights); its shape must equal the stored one.
    pub(crate) fn forward(&self, x: &Tensor, weight: Option<&Tensor>) -> Tensor {
        let batch = x.rows();
        match self {
            Layer::Dense { weight: w, bias } => {
                let w = weight.unwrap_or(w);
                let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
                let mut out = vec![0.0; batch * fan_out];
                if let Some(b) = bias {
                    for row in out.chunks_exact_mut(fan_out) {
                        row.copy_from_slice(b.data());
                    }
                }
                let beta = if bias.is_some() { 1.0 } else { 0.0 };
                gemm(
                    1.0,
                    MatRef::new(x.data(), batch, fan_in),
                    MatRef::new(w.data(), fan_in, fan_out),
                    beta,
                    &mut out,
                );
                Tensor::new(vec![batch, fan_out], out).expect("dense output shape")
            }
            Layer::Conv2d {
                geometry: g,
                weight: w,
                bias,
            } => {
                let w = weight.unwrap_or(w);
                let (patch, area) = (g.patch_len(), g.out_area());
                let out_len = g.out_channels * area;
                let mut cols = vec![0.0; patch * area];
                let mut out = vec![0.0; batch * out_len];
                for (img, dst) in x
                    .data()
                    .chunks_exact(g.in_len())
                    .zip(out.chunks_exact_mut(out_len))
                {
                    g.im2col(img, &mut cols);
                    if let Some(b) = bias {
                        for (ch, row) in dst.chunks_exact_mut(area).enumerate() {
                            row.fill(b.data()[ch]);
                        }
                    }
                    gemm(
                        1.0,
                        MatRef::new(w.data(), g.out_channels, patch),
                        MatRef::new(&cols, patch, area),
                        if bias.is_some() { 1.0 } else { 0.0 },
                        dst,
                    );
                }
                Tensor::new(vec![batch, g.out_channels, g.out_h, g.out_w], out)
                    .expect("conv output shape")
            }
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::Flatten => x
                .clone()
                .reshape(vec![batch, x.row_len()])
                .expect("flatten"),
        }
    }

    /// Backward pass. `x` is the cached input of this layer and `weight` the
    /// effective weight used in the forward pass. Returns the parameter
    /// gradient (if any) and, when requested, the gradient w.r.t. `x`.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        weight: Option<&Tensor>,
        grad_out: &Tensor,
        want_input_grad: bool,
    ) -> (Option<ParamGrad>, Option<Tensor>) {
        let batch = x.rows();
        match self {
            Layer::Dense { weight: w, bias } => {
                let w = weight.unwrap_or(w);
                let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
                let g = MatRef::new(grad_out.data(), batch, fan_out);
                let mut gw = vec![0.0; fan_in * fan_out];
                gemm(
                    1.0,
                    MatRef::new(x.data(), batch, fan_in).t(),
                    g,
                    0.0,
                    &mut gw,
                );
                let gb = bias.as_ref().map(|_| {
                    let mut gb = vec![0.0; fan_out];
                    for row in grad_out.data().chunks_exact(fan_out) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::new(vec![fan_out], gb).expect("bias grad")
                });
                let gx = want_input_grad.then(|| {
                    let mut gx = vec![0.0; batch * fan_in];
                    gemm(
                        1.0,
                        g,
                        MatRef::new(w.data(), fan_in, fan_out).t(),
                        0.0,
                        &mut gx,
                    );
                    Tensor::new(x.shape().to_vec(), gx).expect("dense input grad")
                });
                let pg = ParamGrad {
                    weight: Tensor::new(vec![fan_in, fan_out], gw).expect("dense weight grad"),
                    bias: gb,
                };
                (Some(pg), gx)
            }
            Layer::Conv2d {
                geometry: g,
                weight: w,
                bias,
            } => {
                let w = weight.unwrap_or(w);
                let (patch, area) = (g.patch_len(), g.out_area());
                let out_len = g.out_channels * area;
                let mut cols = vec![0.0; patch * area];
                let mut gcols = vec![0.0; patch * area];
                let mut gw = vec![0.0; g.out_channels * patch];
                let mut gb = vec![0.0; g.out_channels];
                let mut gx = want_input_grad.then(|| vec![0.0; x.len()]);
                for (n, (img, go)) in x
                    .data()
                    .chunks_exact(g.in_len())
                    .zip(grad_out.data().chunks_exact(out_len))
                    .enumerate()
                {
                    g.im2col(img, &mut cols);
                    let go_mat = MatRef::new(go, g.out_channels, area);
                    gemm(
                        1.0,
                        go_mat,
                        MatRef::new(&cols, patch, area).t(),
                        1.0,
                        &mut gw,
                    );
                    for (acc, row) in gb.iter_mut().zip(go.chunks_exact(area)) {
                        *acc += row.iter().sum::<f64>();
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            1.0,
                            MatRef::new(w.data(), g.out_channels, patch).t(),
                            go_mat,
                            0.0,
                            &mut gcols,
                        );
                        g.col2im(&gcols, &mut gx[n * g.in_len()..(n + 1) * g.in_len()]);
                    }
                }
                let pg = ParamGrad {
                    weight: Tensor::new(w.shape().to_vec(), gw).expect("conv weight grad"),
                    bias: bias
                        .as_ref()
                        .map(|_| Tensor::new(vec![g.out_channels], gb).expect("conv bias grad")),
                };
                let gx = gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("conv input grad"));
                (Some(pg), gx)
            }
            Layer::Relu => {
                let gx = want_input_grad.then(|| {
                    let data = x
                        .data()
                        .iter()
                        .zip(grad_out.data())
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data).expect("relu grad")
                });
                (None, gx)
            }
            Layer::Flatten => {
                let gx = want_input_grad.then(|| {
                    grad_out
                        .clone()
                        .reshape(x.shape().to_vec())
                        .expect("flatten grad")
                });
                (None, gx)
            }
        }
    }
}
