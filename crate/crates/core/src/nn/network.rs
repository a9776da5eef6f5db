use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerSpec, ParamGrad};
use super::sparse::{feature_major, SparseWeight, SPARSE_MAX_DENSITY};
use crate::error::{Error, Result};
use crate::masking::{apply, MaskSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Built-in architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Flatten, then hidden ReLU layers of 300 and 100 units.
    Mlp,
    /// Two strided 5x5 conv layers (8 and 16 channels) and a 64-unit head.
    #[serde(rename = "smallconv")]
    SmallConv,
}

impl Architecture {
    pub fn layers(self, input_shape: &[usize], num_classes: usize) -> Vec<LayerSpec> {
        match self {
            Architecture::Mlp => {
                let fan_in = input_shape.iter().product();
                mlp(fan_in, &[300, 100], num_classes)
            }
            Architecture::SmallConv => {
                let (c, h, w) = match *input_shape {
                    [c, h, w] => (c, h, w),
                    _ => (1, 1, input_shape.iter().product()),
                };
                let down = |n: usize| (n + 4 - 5) / 2 + 1;
                let (h2, w2) = (down(down(h)), down(down(w)));
                vec![
                    LayerSpec::Conv2d {
                        in_channels: c,
                        out_channels: 8,
                        kernel: 5,
                        stride: 2,
                        padding: 2,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        in_channels: 8,
                        out_channels: 16,
                        kernel: 5,
                        stride: 2,
                        padding: 2,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        input: 16 * h2 * w2,
                        output: 64,
                        bias: true,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Dense {
                        input: 64,
                        output: num_classes,
                        bias: true,
                    },
                ]
            }
        }
    }
}

/// `Flatten, Dense, ReLU, ..., Dense` with the given hidden widths.
pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Vec<LayerSpec> {
    let mut specs = vec![LayerSpec::Flatten];
    let mut fan_in = input;
    for &h in hidden {
        specs.push(LayerSpec::Dense {
            input: fan_in,
            output: h,
            bias: true,
        });
        specs.push(LayerSpec::Relu);
        fan_in = h;
    }
    specs.push(LayerSpec::Dense {
        input: fan_in,
        output,
        bias: true,
    });
    specs
}

/// Weight a parameterized layer uses for one pass.
#[derive(Debug, Clone)]
enum Effective<'a> {
    Stored,
    Borrowed(&'a Tensor),
    Dense(Tensor),
    Sparse(SparseWeight),
}

impl Effective<'_> {
    fn dense(&self) -> Option<&Tensor> {
        match self {
            Effective::Borrowed(w) => Some(w),
            Effective::Dense(w) => Some(w),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    batch: usize,
    /// Per-layer inputs; sparse layers keep theirs feature-major.
    inputs: Vec<Tensor>,
    weights: Vec<Effective<'static>>,
}

/// Ordered stack of layers with a single-batch activation cache for
/// reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

/// Parameter gradients, one entry per parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ParamGrad>,
}

impl Gradients {
    /// Flattened in the same order as [`Network::params_mut`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|g| std::iter::once(&g.weight).chain(g.bias.as_ref()))
            .collect()
    }
}

impl Network {
    /// Builds a network for per-sample `input_shape`; fails if adjacent
    /// layer shapes do not compose.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for &spec in specs {
            let (layer, out) = Layer::build(spec, &shape, rng)?;
            layers.push(layer);
            shape = out;
        }
        if shape.len() != 1 {
            return Err(Error::invalid(format!(
                "network output must be a vector of logits, got per-sample shape {shape:?}"
            )));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            layers,
            cache: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_outputs(&self) -> usize {
        self.output_shape[0]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Names of the maskable weight tensors, e.g. `layers.1.weight`.
    pub fn weight_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| format!("layers.{i}.weight"))
            .collect()
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(Layer::weight).collect()
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(Layer::weight_mut)
            .collect()
    }

    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.weight_names()
            .into_iter()
            .zip(self.weights())
            .map(|(n, w)| (n, w.shape().to_vec()))
            .collect()
    }

    pub fn biases(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(Layer::bias).collect()
    }

    /// Weights and biases, layer by layer (weight first).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter(|l| l.has_params())
            .flat_map(|l| l.weight().into_iter().chain(l.bias()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() < 2 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::Shape {
                context: "network input",
                expected,
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_weights(&self, weights: &[Tensor]) -> Result<()> {
        let own = self.weights();
        if own.len() != weights.len() {
            return Err(Error::invalid(format!(
                "expected {} weight tensors, got {}",
                own.len(),
                weights.len()
            )));
        }
        for (w, o) in weights.iter().zip(own) {
            if w.shape() != o.shape() {
                return Err(Error::Shape {
                    context: "weight override",
                    expected: o.shape().to_vec(),
                    actual: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn run(
        &self,
        x: &Tensor,
        weights: &[Effective<'_>],
        mut record: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        self.check_input(x)?;
        let mut act = x.clone();
        let mut w_idx = 0;
        for layer in &self.layers {
            let w = if layer.has_params() {
                w_idx += 1;
                weights.get(w_idx - 1).unwrap_or(&Effective::Stored)
            } else {
                &Effective::Stored
            };
            let (next, seen) = match w {
                Effective::Sparse(sw) => {
                    let x_t = feature_major(&act);
                    (sw.forward_t(&x_t, layer.bias()), x_t)
                }
                other => (layer.forward(&act, other.dense()), act),
            };
            if let Some(rec) = record.as_deref_mut() {
                rec.push(seen);
            }
            act = next;
        }
        act.ensure_finite("forward")?;
        Ok(act)
    }

    fn borrowed<'a>(&self, weights: Option<&'a [Tensor]>) -> Result<Vec<Effective<'a>>> {
        match weights {
            Some(ws) => {
                self.check_weights(ws)?;
                Ok(ws.iter().map(Effective::Borrowed).collect())
            }
            None => Ok(Vec::new()),
        }
    }

    /// Per-layer `W ∘ M`. Dense layers with a sparse enough mask keep only
    /// the mask's entries and skip pruned ones in both passes.
    fn masked(&self, mask: &MaskSet) -> Result<Vec<Effective<'static>>> {
        let own = self.weights();
        mask.check_against(&own)?;
        let layers = self.layers.iter().filter(|l| l.has_params());
        layers
            .zip(own)
            .zip(&mask.layers)
            .map(|((layer, w), m)| {
                let density = m.active() as f64 / m.len().max(1) as f64;
                if matches!(layer, Layer::Dense { .. }) && density <= SPARSE_MAX_DENSITY {
                    Ok(Effective::Sparse(SparseWeight::from_masked(w, &m.bits)))
                } else {
                    apply(w, m).map(Effective::Dense)
                }
            })
            .collect()
    }

    fn forward_with(&mut self, x: &Tensor, weights: Vec<Effective<'static>>) -> Result<Tensor> {
        self.cache = None;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let out = self.run(x, &weights, Some(&mut inputs))?;
        self.cache = Some(ForwardCache {
            batch: x.rows(),
            inputs,
            weights,
        });
        Ok(out)
    }

    /// Forward pass that caches activations for [`backward`](Self::backward).
    /// `weights`, when given, replaces the stored weights for this pass (one
    /// tensor per parameterized layer); biases always come from the network.
    pub fn forward(&mut self, x: &Tensor, weights: Option<Vec<Tensor>>) -> Result<Tensor> {
        let weights = match weights {
            Some(ws) => {
                self.check_weights(&ws)?;
                ws.into_iter().map(Effective::Dense).collect()
            }
            None => Vec::new(),
        };
        self.forward_with(x, weights)
    }

    /// [`forward`](Self::forward) with weights `W ∘ M`. Gradients from the
    /// following backward are w.r.t. the masked weights and are zero at
    /// pruned positions of sparse dense layers.
    pub fn forward_masked(&mut self, x: &Tensor, mask: &MaskSet) -> Result<Tensor> {
        let weights = self.masked(mask)?;
        self.forward_with(x, weights)
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor, weights: Option<&[Tensor]>) -> Result<Tensor> {
        self.run(x, &self.borrowed(weights)?, None)
    }

    /// [`infer`](Self::infer) with weights `W ∘ M`.
    pub fn infer_masked(&self, x: &Tensor, mask: &MaskSet) -> Result<Tensor> {
        self.run(x, &self.masked(mask)?, None)
    }

    /// [`infer`](Self::infer) in chunks of `batch` rows.
    pub fn infer_batched(
        &self,
        x: &Tensor,
        weights: Option<&[Tensor]>,
        batch: usize,
    ) -> Result<Tensor> {
        self.run_batched(x, &self.borrowed(weights)?, batch)
    }

    /// [`infer_masked`](Self::infer_masked) in chunks of `batch` rows.
    pub fn infer_batched_masked(&self, x: &Tensor, mask: &MaskSet, batch: usize) -> Result<Tensor> {
        self.run_batched(x, &self.masked(mask)?, batch)
    }

    fn run_batched(&self, x: &Tensor, weights: &[Effective<'_>], batch: usize) -> Result<Tensor> {
        let n = x.rows();
        let mut data = Vec::with_capacity(n * self.num_outputs());
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            data.extend_from_slice(self.run(&x.gather_rows(&idx), weights, None)?.data());
            start = end;
        }
        Tensor::new(vec![n, self.num_outputs()], data)
    }

    /// Reverse pass from the logit gradient of the last cached forward.
    /// Gradients are w.r.t. the weights actually used in that forward.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let batch = cache.batch;
        if grad_logits.shape() != [batch, self.num_outputs()] {
            return Err(Error::Shape {
                context: "backward grad_logits",
                expected: vec![batch, self.num_outputs()],
                actual: grad_logits.shape().to_vec(),
            });
        }
        let first_param = self.layers.iter().position(Layer::has_params).unwrap_or(0);
        let mut w_idx = self.weights().len();
        let mut grad = grad_logits.clone();
        let mut out = Vec::with_capacity(w_idx);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let want_input = i > first_param;
            let (pg, gx) = if layer.has_params() {
                w_idx -= 1;
                match cache.weights.get(w_idx).unwrap_or(&Effective::Stored) {
                    Effective::Sparse(sw) => {
                        let (pg, gx) = sw.backward_t(
                            &cache.inputs[i],
                            &grad,
                            layer.bias().is_some(),
                            want_input,
                        );
                        (Some(pg), gx)
                    }
                    other => layer.backward(&cache.inputs[i], other.dense(), &grad, want_input),
                }
            } else {
                layer.backward(&cache.inputs[i], None, &grad, want_input)
            };
            if let Some(pg) = pg {
                out.push(pg);
            }
            match gx {
                Some(g) => grad = g,
                None => break,
            }
        }
        out.reverse();
        Ok(Gradients { layers: out })
    }
}
