//! Probability-matrix construction and annealing toward a binary mask.
//!
//! Two initializations are provided. Temperature annealing starts from a
//! binary target mask and lifts pruned entries to a temperature `τ0`
//! (optionally also lowering kept entries to `1 - τ0`). Random annealing
//! draws every probability from a distribution and derives the target mask
//! from it. In both cases each entry then moves from its initial value to its
//! terminal 0/1 value over `φ` epochs along a linear or cosine curve, and is
//! exactly binary from epoch `φ` on.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{complement, LayerMask, LayerProbs, MaskSet, ProbabilitySet};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayShape {
    Linear,
    Cosine,
}

/// Decay from `tau_max` at `t = 0` to `tau_min` at `t = total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub shape: DecayShape,
    pub tau_max: f64,
    pub tau_min: f64,
    pub total_steps: usize,
}

impl AnnealSchedule {
    pub fn new(shape: DecayShape, tau_max: f64, tau_min: f64, total_steps: usize) -> Result<Self> {
        if !(tau_max >= tau_min && tau_min >= 0.0) {
            return Err(Error::invalid(format!(
                "anneal schedule needs tau_max >= tau_min >= 0, got {tau_max} and {tau_min}"
            )));
        }
        Ok(Self {
            shape,
            tau_max,
            tau_min,
            total_steps,
        })
    }
}

/// Value of the decay curve at step `t`; steps past the end clamp to
/// `tau_min`. The cosine curve uses `cos(π t / T)` so that both endpoints
/// are reached, and both endpoints are returned exactly.
pub fn schedule_value(s: &AnnealSchedule, t: usize) -> f64 {
    if t >= s.total_steps {
        return s.tau_min;
    }
    if t == 0 {
        return s.tau_max;
    }
    let frac = t as f64 / s.total_steps as f64;
    let span = s.tau_max - s.tau_min;
    match s.shape {
        DecayShape::Linear => s.tau_max - span * frac,
        DecayShape::Cosine => s.tau_min + 0.5 * span * (1.0 + (PI * frac).cos()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureVariant {
    /// Kept entries stay at 1; pruned entries start at `τ0`.
    ReverseDropout,
    /// Kept entries start at `1 - τ0`; pruned entries start at `τ0`.
    FullScaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub tau0: f64,
    pub variant: TemperatureVariant,
    pub decay: DecayShape,
    pub epochs: usize,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            tau0: 0.5,
            variant: TemperatureVariant::ReverseDropout,
            decay: DecayShape::Cosine,
            epochs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitDistribution {
    Uniform,
    /// Entries targeted for pruning draw from `N(mu_pruned, sigma_pruned²)`,
    /// kept entries from `N(mu_kept, sigma_kept²)`; clamped to `[0, 1]`.
    Bimodal {
        mu_pruned: f64,
        sigma_pruned: f64,
        mu_kept: f64,
        sigma_kept: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomAnnealConfig {
    pub distribution: InitDistribution,
    pub sparsity: f64,
    pub decay: DecayShape,
    pub epochs: usize,
}

/// Probabilities for a target mask under temperature `τ0`.
pub fn init_temperature(target: &MaskSet, cfg: &TemperatureConfig) -> Result<ProbabilitySet> {
    if !(0.0..=1.0).contains(&cfg.tau0) {
        return Err(Error::invalid(format!(
            "temperature {} outside [0, 1]",
            cfg.tau0
        )));
    }
    let kept = match cfg.variant {
        TemperatureVariant::ReverseDropout => 1.0,
        TemperatureVariant::FullScaling => 1.0 - cfg.tau0,
    };
    let layers = target
        .layers
        .iter()
        .map(|l| {
            let probs = l
                .bits
                .iter()
                .map(|&b| if b == 1 { kept } else { cfg.tau0 })
                .collect();
            LayerProbs::new(l.name.clone(), l.shape.clone(), probs)
        })
        .collect();
    ProbabilitySet::new(layers, target.clone())
}

/// Randomly initialized probabilities and the terminal mask they imply.
///
/// Uniform: `P ~ U[0, 1)`, terminal is `P >= ρ`. Bimodal: an index mask `X`
/// with `P(X = 1) = 1 - ρ` picks which normal each entry draws from, and `X`
/// is the terminal. Fails if some layer's terminal mask has no active entry.
pub fn init_random(
    shapes: &[(String, Vec<usize>)],
    cfg: &RandomAnnealConfig,
    rng: &mut Rng,
) -> Result<ProbabilitySet> {
    if !(0.0..1.0).contains(&cfg.sparsity) {
        return Err(Error::invalid(format!(
            "sparsity {} outside [0, 1)",
            cfg.sparsity
        )));
    }
    let normals = match cfg.distribution {
        InitDistribution::Uniform => None,
        InitDistribution::Bimodal {
            mu_pruned,
            sigma_pruned,
            mu_kept,
            sigma_kept,
        } => {
            if !(sigma_pruned > 0.0 && sigma_kept > 0.0) {
                return Err(Error::invalid(
                    "bimodal standard deviations must be positive",
                ));
            }
            let make =
                |mu, sigma| Normal::new(mu, sigma).map_err(|e| Error::invalid(e.to_string()));
            Some((make(mu_pruned, sigma_pruned)?, make(mu_kept, sigma_kept)?))
        }
    };
    let mut layers = Vec::with_capacity(shapes.len());
    let mut terminal = Vec::with_capacity(shapes.len());
    let mut clamped = 0usize;
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let (probs, bits): (Vec<f64>, Vec<u8>) = match &normals {
            None => (0..n)
                .map(|_| {
                    let p: f64 = rng.random();
                    (p, (p >= cfg.sparsity) as u8)
                })
                .unzip(),
            Some((pruned, kept)) => (0..n)
                .map(|_| {
                    let keep = rng.random::<f64>() < 1.0 - cfg.sparsity;
                    let raw = if keep {
                        kept.sample(rng)
                    } else {
                        pruned.sample(rng)
                    };
                    if !(0.0..=1.0).contains(&raw) {
                        clamped += 1;
                    }
                    (raw.clamp(0.0, 1.0), keep as u8)
                })
                .unzip(),
        };
        if bits.iter().all(|&b| b == 0) {
            return Err(Error::SeveredLayer {
                layer: name.clone(),
                quota: n,
                size: n,
            });
        }
        layers.push(LayerProbs::new(name.clone(), shape.clone(), probs));
        terminal.push(LayerMask::new(name.clone(), shape.clone(), bits)?);
    }
    if clamped > 0 {
        log::debug!("random anneal init clamped {clamped} gaussian draws into [0, 1]");
    }
    ProbabilitySet::new(layers, MaskSet { layers: terminal })
}

/// Probabilities at epoch `e` of an annealing run of `epochs` epochs.
///
/// Each entry interpolates from its initial value to its terminal value with
/// weight `s(e)` falling from 1 to 0 along `decay`. `e = 0` returns `init`
/// and `e >= epochs` returns the terminal mask exactly.
pub fn probs_at_epoch(
    init: &ProbabilitySet,
    decay: DecayShape,
    epochs: usize,
    e: usize,
) -> ProbabilitySet {
    if e == 0 && epochs > 0 {
        return init.clone();
    }
    let weight = AnnealSchedule {
        shape: decay,
        tau_max: 1.0,
        tau_min: 0.0,
        total_steps: epochs,
    };
    let s = schedule_value(&weight, e);
    let layers = init
        .layers
        .iter()
        .zip(&init.terminal.layers)
        .map(|(p, t)| {
            // Interpolate in the stored polarity so complemented sets stay
            // exact complements of their partner at every epoch.
            let flip = p.is_complemented();
            let raw = p
                .raw()
                .iter()
                .zip(&t.bits)
                .map(|(&start, &bit)| {
                    let end = if flip { (1 - bit) as f64 } else { bit as f64 };
                    if s == 0.0 {
                        end
                    } else {
                        end + (start - end) * s
                    }
                })
                .collect();
            p.with_raw(raw)
        })
        .collect();
    ProbabilitySet {
        layers,
        terminal: init.terminal.clone(),
    }
}

/// `P' = 1 - P` with the complemented terminal mask.
pub fn anti_probability(probs: &ProbabilitySet) -> ProbabilitySet {
    ProbabilitySet {
        layers: probs.layers.iter().map(LayerProbs::flipped).collect(),
        terminal: complement(&probs.terminal),
    }
}

/// Initial probabilities plus the curve that carries them to the terminal
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Annealer {
    pub init: ProbabilitySet,
    pub decay: DecayShape,
    pub epochs: usize,
}

impl Annealer {
    pub fn temperature(target: &MaskSet, cfg: &TemperatureConfig) -> Result<Self> {
        Ok(Self {
            init: init_temperature(target, cfg)?,
            decay: cfg.decay,
            epochs: cfg.epochs,
        })
    }

    pub fn random(
        shapes: &[(String, Vec<usize>)],
        cfg: &RandomAnnealConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            init: init_random(shapes, cfg, rng)?,
            decay: cfg.decay,
            epochs: cfg.epochs,
        })
    }

    pub fn probs_at_epoch(&self, e: usize) -> ProbabilitySet {
        probs_at_epoch(&self.init, self.decay, self.epochs, e)
    }

    pub fn terminal(&self) -> &MaskSet {
        &self.init.terminal
    }

    /// The sibling annealer whose probabilities are `1 - P` at every epoch.
    pub fn anti(&self) -> Self {
        Self {
            init: anti_probability(&self.init),
            decay: self.decay,
            epochs: self.epochs,
        }
    }
}
