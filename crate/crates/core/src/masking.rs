//! Binary and probabilistic subnetwork masks.
//!
//! A [`MaskSet`] holds one binary matrix per weight tensor (biases are never
//! masked). A [`ProbabilitySet`] holds per-weight retention probabilities
//! together with the binary terminal mask they anneal toward; [`realize`]
//! draws a fresh Bernoulli mask from it.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Sparsity quota applied to each layer independently.
    Layerwise,
    /// One quota pooled over every maskable weight.
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major, each entry exactly 0 or 1.
    pub bits: Vec<u8>,
}

impl LayerMask {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, bits: Vec<u8>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != bits.len() {
            return Err(Error::Shape {
                context: "LayerMask::new",
                expected: shape,
                actual: vec![bits.len()],
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid(format!(
                "mask '{name}' has non-binary entries"
            )));
        }
        Ok(Self { name, shape, bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn zeros(&self) -> usize {
        self.len() - self.active()
    }

    pub fn active(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub layers: Vec<LayerMask>,
}

impl MaskSet {
    pub fn filled(shapes: &[(String, Vec<usize>)], value: u8) -> Self {
        assert!(value <= 1);
        Self {
            layers: shapes
                .iter()
                .map(|(name, shape)| LayerMask {
                    name: name.clone(),
                    shape: shape.clone(),
                    bits: vec![value; shape.iter().product()],
                })
                .collect(),
        }
    }

    pub fn ones(shapes: &[(String, Vec<usize>)]) -> Self {
        Self::filled(shapes, 1)
    }

    pub fn zeros(shapes: &[(String, Vec<usize>)]) -> Self {
        Self::filled(shapes, 0)
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.shape.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerMask::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn active(&self) -> usize {
        self.layers.iter().map(LayerMask::active).sum()
    }

    pub fn same_layout(&self, other: &MaskSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Elementwise `self <= other`.
    pub fn is_subset_of(&self, other: &MaskSet) -> bool {
        self.same_layout(other)
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.bits.iter().zip(&b.bits).all(|(x, y)| x <= y))
    }

    /// Number of positions active in both masks.
    pub fn overlap(&self, other: &MaskSet) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                a.bits
                    .iter()
                    .zip(&b.bits)
                    .filter(|(&x, &y)| x == 1 && y == 1)
                    .count()
            })
            .sum()
    }

    pub fn check_against(&self, weights: &[&Tensor]) -> Result<()> {
        if self.layers.len() != weights.len() {
            return Err(Error::invalid(format!(
                "mask has {} layers, network has {} weight tensors",
                self.layers.len(),
                weights.len()
            )));
        }
        for (m, w) in self.layers.iter().zip(weights) {
            if m.shape != w.shape() {
                return Err(Error::Shape {
                    context: "mask vs weight",
                    expected: w.shape().to_vec(),
                    actual: m.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Retention probabilities of one weight tensor.
///
/// Stored as raw values plus a polarity flag: when `complemented` is set the
/// effective probability is `1 - raw`. Complementing flips the flag instead of
/// rewriting values, so taking the anti-probability twice is an exact
/// identity and `p + (1 - p)` sums to exactly 1 for every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbs {
    pub name: String,
    pub shape: Vec<usize>,
    raw: Vec<f64>,
    complemented: bool,
}

impl LayerProbs {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, probs: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            raw: probs,
            complemented: false,
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        let p = self.raw[i];
        if self.complemented {
            1.0 - p
        } else {
            p
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.raw.len()).map(|i| self.get(i))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn is_complemented(&self) -> bool {
        self.complemented
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub(crate) fn with_raw(&self, raw: Vec<f64>) -> Self {
        Self {
            name: self.name.clone(),
            shape: self.shape.clone(),
            raw,
            complemented: self.complemented,
        }
    }

    pub(crate) fn flipped(&self) -> Self {
        Self {
            complemented: !self.complemented,
            ..self.clone()
        }
    }
}

/// Retention probabilities plus the binary mask they anneal toward.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySet {
    pub layers: Vec<LayerProbs>,
    pub terminal: MaskSet,
}

impl ProbabilitySet {
    pub fn new(layers: Vec<LayerProbs>, terminal: MaskSet) -> Result<Self> {
        let set = Self { layers, terminal };
        set.validate()?;
        Ok(set)
    }

    /// Binary probabilities equal to `mask`, with `mask` as terminal.
    pub fn from_mask(mask: &MaskSet) -> Self {
        Self {
            layers: mask
                .layers
                .iter()
                .map(|l| {
                    LayerProbs::new(
                        l.name.clone(),
                        l.shape.clone(),
                        l.bits.iter().map(|&b| b as f64).collect(),
                    )
                })
                .collect(),
            terminal: mask.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.terminal.layers.len() {
            return Err(Error::invalid(
                "probability and terminal layer counts differ",
            ));
        }
        for (p, t) in self.layers.iter().zip(&self.terminal.layers) {
            if p.name != t.name || p.shape != t.shape {
                return Err(Error::Shape {
                    context: "probability vs terminal layer",
                    expected: t.shape.clone(),
                    actual: p.shape.clone(),
                });
            }
            if p.len() != p.shape.iter().product::<usize>() {
                return Err(Error::Shape {
                    context: "probability layer length",
                    expected: p.shape.clone(),
                    actual: vec![p.len()],
                });
            }
            if let Some(v) = p.raw.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!(
                    "probability {v} outside [0, 1] in layer '{}'",
                    p.name
                )));
            }
            if t.bits.iter().any(|&b| b > 1) {
                return Err(Error::invalid("terminal mask is not binary"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerProbs::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean probability over all entries: the expected active fraction.
    pub fn mean(&self) -> f64 {
        let sum: f64 = self.layers.iter().flat_map(LayerProbs::iter).sum();
        sum / self.len() as f64
    }

    /// True when every probability is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.iter().all(|p| p == 0.0 || p == 1.0))
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.terminal.shapes()
    }
}

/// Draws one Bernoulli mask: entry `ij` is 1 with probability `P_ij`.
/// Entries with probability exactly 0 or 1 consume no randomness.
pub fn realize(probs: &ProbabilitySet, rng: &mut Rng) -> MaskSet {
    MaskSet {
        layers: probs
            .layers
            .iter()
            .map(|l| LayerMask {
                name: l.name.clone(),
                shape: l.shape.clone(),
                bits: l
                    .iter()
                    .map(|p| {
                        if p >= 1.0 {
                            1
                        } else if p <= 0.0 {
                            0
                        } else {
                            (rng.random::<f64>() < p) as u8
                        }
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn check_same(context: &'static str, tensor: &Tensor, shape: &[usize]) -> Result<()> {
    if tensor.shape() != shape {
        return Err(Error::Shape {
            context,
            expected: tensor.shape().to_vec(),
            actual: shape.to_vec(),
        });
    }
    Ok(())
}

/// Hadamard product `W ∘ M`. `W` itself is left untouched.
pub fn apply(weight: &Tensor, mask: &LayerMask) -> Result<Tensor> {
    check_same("apply", weight, &mask.shape)?;
    let mut out = weight.clone();
    for (w, &m) in out.data_mut().iter_mut().zip(&mask.bits) {
        if m == 0 {
            *w = 0.0;
        }
    }
    Ok(out)
}

/// `W ∘ P`, the expected masked weight.
pub fn apply_expected(weight: &Tensor, probs: &LayerProbs) -> Result<Tensor> {
    check_same("apply_expected", weight, &probs.shape)?;
    let mut out = weight.clone();
    for (w, p) in out.data_mut().iter_mut().zip(probs.iter()) {
        *w *= p;
    }
    Ok(out)
}

/// `grad ∘ M`: masked-out weights receive exactly zero gradient.
pub fn masked_grad(grad: &Tensor, mask: &LayerMask) -> Result<Tensor> {
    apply(grad, mask)
}

/// [`masked_grad`] without the copy.
pub fn mask_in_place(grad: &mut Tensor, mask: &LayerMask) -> Result<()> {
    check_same("mask_in_place", grad, &mask.shape)?;
    for (g, &m) in grad.data_mut().iter_mut().zip(&mask.bits) {
        *g = if m == 0 { 0.0 } else { *g };
    }
    Ok(())
}

/// Applies a full mask set to a network's weight list.
pub fn apply_all(weights: &[&Tensor], masks: &MaskSet) -> Result<Vec<Tensor>> {
    masks.check_against(weights)?;
    weights
        .iter()
        .zip(&masks.layers)
        .map(|(w, m)| apply(w, m))
        .collect()
}

pub fn apply_expected_all(weights: &[&Tensor], probs: &ProbabilitySet) -> Result<Vec<Tensor>> {
    probs.terminal.check_against(weights)?;
    weights
        .iter()
        .zip(&probs.layers)
        .map(|(w, p)| apply_expected(w, p))
        .collect()
}

/// Fraction of zero entries over all maskable parameters.
pub fn sparsity(mask: &MaskSet) -> f64 {
    let n = mask.len();
    if n == 0 {
        return 0.0;
    }
    (n - mask.active()) as f64 / n as f64
}

/// Entrywise `1 - M`.
pub fn complement(mask: &MaskSet) -> MaskSet {
    MaskSet {
        layers: mask
            .layers
            .iter()
            .map(|l| LayerMask {
                name: l.name.clone(),
                shape: l.shape.clone(),
                bits: l.bits.iter().map(|&b| 1 - b).collect(),
            })
            .collect(),
    }
}

/// Zeros every weight whose mask entry is 0, in place.
pub fn finalize(weights: &mut [&mut Tensor], mask: &MaskSet) -> Result<()> {
    let view: Vec<&Tensor> = weights.iter().map(|w| &**w).collect();
    mask.check_against(&view)?;
    for (w, m) in weights.iter_mut().zip(&mask.layers) {
        for (v, &b) in w.data_mut().iter_mut().zip(&m.bits) {
            if b == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(())
}
