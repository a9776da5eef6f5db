//! One-shot and iterative pruning baselines.
//!
//! Quotas are `round(level * n)` with half-away-from-zero rounding. Random
//! selection samples uniformly without replacement among active entries;
//! magnitude selection removes the smallest `|w|`, ties broken by ascending
//! flat index. A pruning step only ever adds zeros.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{Granularity, MaskSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selector {
    #[serde(rename = "random")]
    RandomUnstructured,
    #[serde(rename = "magnitude")]
    MagnitudeL1,
}

impl Selector {
    pub fn name(self) -> &'static str {
        match self {
            Selector::RandomUnstructured => "random",
            Selector::MagnitudeL1 => "magnitude",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub selector: Selector,
    pub granularity: Granularity,
    pub target_sparsity: f64,
}

impl PruneSpec {
    pub fn validate(&self) -> Result<()> {
        check_level(self.target_sparsity)
    }
}

fn check_level(level: f64) -> Result<()> {
    if (0.0..1.0).contains(&level) {
        Ok(())
    } else {
        Err(Error::invalid(format!("sparsity {level} outside [0, 1)")))
    }
}

/// Number of zeros for `level` over `n` entries.
pub fn quota(level: f64, n: usize) -> usize {
    // f64::round rounds half away from zero.
    ((level * n as f64).round() as usize).min(n)
}

/// Per-epoch sparsity levels of an iterative pruning run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterativeSchedule {
    levels: Vec<f64>,
}

impl IterativeSchedule {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn epochs(&self) -> usize {
        self.levels.len()
    }

    /// Level to prune to at the start of `epoch`, or `None` once done.
    pub fn level_at(&self, epoch: usize) -> Option<f64> {
        self.levels.get(epoch).copied()
    }
}

/// Equal increments `ρ·k/φ` for `k = 1..=φ`; the last level is exactly `ρ`.
pub fn make_iterative_schedule(target: f64, epochs: usize) -> Result<IterativeSchedule> {
    check_level(target)?;
    if epochs == 0 {
        return Err(Error::invalid("iterative pruning needs at least one epoch"));
    }
    let mut levels: Vec<f64> = (1..=epochs)
        .map(|k| target * k as f64 / epochs as f64)
        .collect();
    *levels.last_mut().expect("nonempty") = target;
    Ok(IterativeSchedule { levels })
}

enum Choice<'a> {
    Random(&'a mut Rng),
    Magnitude(&'a [&'a Tensor]),
}

/// Picks `k` of the `(layer, index)` candidates to prune.
fn choose(candidates: &[(usize, usize)], k: usize, choice: &mut Choice<'_>) -> Vec<(usize, usize)> {
    match choice {
        Choice::Random(rng) => index::sample(*rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect(),
        Choice::Magnitude(weights) => {
            // Candidates are generated in flat order, so a stable sort on |w|
            // leaves ties ordered by ascending flat index.
            let mut sorted = candidates.to_vec();
            sorted.sort_by(|&(la, ia), &(lb, ib)| {
                weights[la].data()[ia]
                    .abs()
                    .total_cmp(&weights[lb].data()[ib].abs())
            });
            sorted.truncate(k);
            sorted
        }
    }
}

fn increment(
    current: &MaskSet,
    level: f64,
    granularity: Granularity,
    mut choice: Choice<'_>,
) -> Result<MaskSet> {
    check_level(level)?;
    if let Choice::Magnitude(w) = &choice {
        current.check_against(w)?;
    }
    let mut next = current.clone();
    match granularity {
        Granularity::Layerwise => {
            for (li, layer) in current.layers.iter().enumerate() {
                let n = layer.len();
                let target = quota(level, n);
                if target >= n {
                    return Err(Error::SeveredLayer {
                        layer: layer.name.clone(),
                        quota: target,
                        size: n,
                    });
                }
                let zeros = layer.zeros();
                if target < zeros {
                    return Err(Error::invalid(format!(
                        "layer '{}' already has {zeros} zeros, above the quota {target} for level {level}",
                        layer.name
                    )));
                }
                let active: Vec<(usize, usize)> = layer
                    .bits
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(i, _)| (li, i))
                    .collect();
                for (l, i) in choose(&active, target - zeros, &mut choice) {
                    next.layers[l].bits[i] = 0;
                }
            }
        }
        Granularity::Global => {
            let n = current.len();
            let target = quota(level, n);
            let zeros = n - current.active();
            if target < zeros {
                return Err(Error::invalid(format!(
                    "mask already has {zeros} zeros, above the quota {target} for level {level}"
                )));
            }
            let active: Vec<(usize, usize)> = current
                .layers
                .iter()
                .enumerate()
                .flat_map(|(l, layer)| {
                    layer
                        .bits
                        .iter()
                        .enumerate()
                        .filter(|(_, &b)| b == 1)
                        .map(move |(i, _)| (l, i))
                })
                .collect();
            for (l, i) in choose(&active, target - zeros, &mut choice) {
                next.layers[l].bits[i] = 0;
            }
            if let Some(layer) = next.layers.iter().find(|l| l.active() == 0) {
                return Err(Error::SeveredLayer {
                    layer: layer.name.clone(),
                    quota: layer.len(),
                    size: layer.len(),
                });
            }
        }
    }
    Ok(next)
}

/// Prunes further from `current` until `next_level` is met exactly.
/// Previously pruned entries stay pruned.
pub fn prune_increment(
    current: &MaskSet,
    next_level: f64,
    selector: Selector,
    granularity: Granularity,
    weights: &[&Tensor],
    rng: &mut Rng,
) -> Result<MaskSet> {
    let choice = match selector {
        Selector::RandomUnstructured => Choice::Random(rng),
        Selector::MagnitudeL1 => Choice::Magnitude(weights),
    };
    increment(current, next_level, granularity, choice)
}

/// One-shot random pruning of an all-ones mask.
pub fn random_mask(
    shapes: &[(String, Vec<usize>)],
    spec: &PruneSpec,
    rng: &mut Rng,
) -> Result<MaskSet> {
    spec.validate()?;
    increment(
        &MaskSet::ones(shapes),
        spec.target_sparsity,
        spec.granularity,
        Choice::Random(rng),
    )
}

/// One-shot magnitude pruning of an all-ones mask.
pub fn magnitude_mask(
    shapes: &[(String, Vec<usize>)],
    weights: &[&Tensor],
    spec: &PruneSpec,
) -> Result<MaskSet> {
    spec.validate()?;
    increment(
        &MaskSet::ones(shapes),
        spec.target_sparsity,
        spec.granularity,
        Choice::Magnitude(weights),
    )
}

/// One-shot mask with whichever selector `spec` names.
pub fn one_shot_mask(
    shapes: &[(String, Vec<usize>)],
    weights: &[&Tensor],
    spec: &PruneSpec,
    rng: &mut Rng,
) -> Result<MaskSet> {
    match spec.selector {
        Selector::RandomUnstructured => random_mask(shapes, spec, rng),
        Selector::MagnitudeL1 => magnitude_mask(shapes, weights, spec),
    }
}
