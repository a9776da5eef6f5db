//! Prune-and-tune ensembles: a dense parent is trained once, children are
//! spawned from it with random masks (optionally in complementary pairs),
//! each child is tuned under an annealed mask, and predictions are the
//! softmax of the mean member logits.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealing::{Annealer, DecayShape, TemperatureConfig, TemperatureVariant};
use crate::data::{corrupt, Dataset, Split};
use crate::error::{Error, Result};
use crate::masking::{sparsity, Granularity, MaskSet};
use crate::metrics::{evaluate, Metrics};
use crate::nn::{softmax, Network};
use crate::pruning::{random_mask, PruneSpec, Selector};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::train::{fit, logits, tune, EvalMask, SubnetworkPlan, TrainConfig, TuneOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub parent: TrainConfig,
    pub child: TrainConfig,
    pub anneal_epochs: usize,
    pub sparsity: f64,
    pub tau0: f64,
    #[serde(default = "default_variant")]
    pub variant: TemperatureVariant,
    #[serde(default = "default_decay")]
    pub decay: DecayShape,
    #[serde(default = "yes")]
    pub partitioning: bool,
    #[serde(default)]
    pub include_parent: bool,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
}

fn default_variant() -> TemperatureVariant {
    TemperatureVariant::ReverseDropout
}
fn default_decay() -> DecayShape {
    DecayShape::Cosine
}
fn yes() -> bool {
    true
}
fn default_granularity() -> Granularity {
    Granularity::Layerwise
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        if self.anneal_epochs > self.child.epochs {
            return Err(Error::Config(format!(
                "annealing epochs ({}) exceed child epochs ({})",
                self.anneal_epochs, self.child.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity {} outside [0, 1)",
                self.sparsity
            )));
        }
        if !(0.0..=1.0).contains(&self.tau0) {
            return Err(Error::Config(format!(
                "temperature {} outside [0, 1]",
                self.tau0
            )));
        }
        self.parent.validate()?;
        self.child.validate()
    }

    fn temperature(&self) -> TemperatureConfig {
        TemperatureConfig {
            tau0: self.tau0,
            variant: self.variant,
            decay: self.decay,
            epochs: self.anneal_epochs,
        }
    }
}

/// Metrics of one member or of the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub loss_trail: Vec<f64>,
    pub realized_sparsity: f64,
}

impl MetricsRecord {
    pub fn new(m: Metrics, loss_trail: Vec<f64>, realized_sparsity: f64) -> Self {
        Self {
            accuracy: m.accuracy,
            nll: m.nll,
            ece: m.ece,
            loss_trail,
            realized_sparsity,
        }
    }
}

/// A child before tuning: a copy of the parent and its annealer.
#[derive(Debug, Clone)]
pub struct Child {
    pub index: usize,
    pub net: Network,
    pub annealer: Annealer,
}

impl Child {
    pub fn mask(&self) -> &MaskSet {
        self.annealer.terminal()
    }
}

/// Trains the parent densely; member stream 0 is reserved for it.
pub fn train_parent(
    net: &mut Network,
    split: &Split,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TuneOutcome> {
    fit(net, &split.train, &split.test, cfg, seed, 0)
}

/// Clones the parent `cfg.members` times with random masks at
/// `cfg.sparsity`. With partitioning, children `2k` and `2k + 1` carry
/// complementary masks and complementary probability matrices.
pub fn spawn_children(parent: &Network, cfg: &EnsembleConfig, seed: u64) -> Result<Vec<Child>> {
    cfg.validate()?;
    if cfg.partitioning && cfg.sparsity != 0.5 {
        log::warn!(
            "partitioning at sparsity {}: complementary siblings have sparsity {}",
            cfg.sparsity,
            1.0 - cfg.sparsity
        );
    }
    let shapes = parent.weight_shapes();
    let spec = PruneSpec {
        selector: Selector::RandomUnstructured,
        granularity: cfg.granularity,
        target_sparsity: cfg.sparsity,
    };
    let temp = cfg.temperature();
    let mut children = Vec::with_capacity(cfg.members);
    let mut index = 0;
    while index < cfg.members {
        let mask = random_mask(
            &shapes,
            &spec,
            &mut stream(seed, Purpose::Mask, index as u64),
        )?;
        let annealer = Annealer::temperature(&mask, &temp)?;
        children.push(Child {
            index,
            net: parent.clone(),
            annealer: annealer.clone(),
        });
        index += 1;
        if cfg.partitioning && index < cfg.members {
            children.push(Child {
                index,
                net: parent.clone(),
                annealer: annealer.anti(),
            });
            index += 1;
        }
    }
    Ok(children)
}

#[derive(Debug, Clone)]
pub struct Member {
    pub index: usize,
    pub net: Network,
    pub outcome: TuneOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct TunedEnsemble {
    pub members: Vec<Member>,
    pub failures: Vec<MemberFailure>,
}

/// Tunes every child under its annealer on up to `threads` worker threads.
/// Each child draws from its own streams, so results do not depend on the
/// thread count. Failed children are dropped and listed in `failures`.
pub fn tune_children(
    children: Vec<Child>,
    cfg: &EnsembleConfig,
    split: &Split,
    seed: u64,
    threads: usize,
) -> Result<TunedEnsemble> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<(usize, Result<Member>)> = pool.install(|| {
        children
            .into_par_iter()
            .map(|mut child| {
                let plan = SubnetworkPlan::Annealed {
                    annealer: child.annealer,
                    eval: EvalMask::Terminal,
                };
                let index = child.index;
                let outcome = tune(
                    &mut child.net,
                    plan,
                    &split.train,
                    &split.test,
                    &cfg.child,
                    seed,
                    index as u64 + 1,
                );
                (
                    index,
                    outcome.map(|outcome| Member {
                        index,
                        net: child.net,
                        outcome,
                    }),
                )
            })
            .collect()
    });
    let mut members = Vec::new();
    let mut failures = Vec::new();
    for (index, r) in results {
        match r {
            Ok(m) => members.push(m),
            Err(e) => {
                log::error!("ensemble member {index} failed: {e}");
                failures.push(MemberFailure {
                    index,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(TunedEnsemble { members, failures })
}

/// Elementwise mean of equally shaped logit tensors.
pub fn mean_logits(all: &[Tensor]) -> Result<Tensor> {
    let first = all.first().ok_or(Error::EmptyEnsemble)?;
    let mut sum = vec![0.0; first.len()];
    for l in all {
        if l.shape() != first.shape() {
            return Err(Error::Shape {
                context: "ensemble logits",
                expected: first.shape().to_vec(),
                actual: l.shape().to_vec(),
            });
        }
        for (s, v) in sum.iter_mut().zip(l.data()) {
            *s += v;
        }
    }
    let n = all.len() as f64;
    Tensor::new(
        first.shape().to_vec(),
        sum.into_iter().map(|s| s / n).collect(),
    )
}

/// `softmax(mean(member logits))`, with the parent's logits included iff
/// `parent` is given.
pub fn predict(members: &[&Network], parent: Option<&Network>, x: &Tensor) -> Result<Tensor> {
    let nets: Vec<&Network> = members.iter().copied().chain(parent).collect();
    if nets.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let all = nets
        .iter()
        .map(|n| n.infer_batched(x, None, 1000))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&mean_logits(&all)?))
}

/// Member and aggregate metrics on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEvaluation {
    pub members: Vec<Metrics>,
    pub ensemble: Metrics,
    pub mean_member: Metrics,
}

impl EnsembleEvaluation {
    pub fn max_member_accuracy(&self) -> f64 {
        self.members
            .iter()
            .map(|m| m.accuracy)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_member_accuracy(&self) -> f64 {
        self.members
            .iter()
            .map(|m| m.accuracy)
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn evaluate_ensemble(
    members: &[&Network],
    parent: Option<&Network>,
    data: &Dataset,
) -> Result<EnsembleEvaluation> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let member_logits = members
        .iter()
        .map(|n| logits(n, data))
        .collect::<Result<Vec<_>>>()?;
    let member_metrics = member_logits
        .iter()
        .map(|l| evaluate(&softmax(l), &data.labels))
        .collect::<Result<Vec<_>>>()?;
    let mut all = member_logits;
    if let Some(p) = parent {
        all.push(logits(p, data)?);
    }
    let ensemble = evaluate(&softmax(&mean_logits(&all)?), &data.labels)?;
    let k = member_metrics.len() as f64;
    let mean_member = Metrics {
        accuracy: member_metrics.iter().map(|m| m.accuracy).sum::<f64>() / k,
        nll: member_metrics.iter().map(|m| m.nll).sum::<f64>() / k,
        ece: member_metrics.iter().map(|m| m.ece).sum::<f64>() / k,
    };
    Ok(EnsembleEvaluation {
        members: member_metrics,
        ensemble,
        mean_member,
    })
}

/// Evaluation on the test set corrupted with Gaussian noise at `severity`;
/// the noise stream is keyed by the severity.
pub fn evaluate_corrupted(
    members: &[&Network],
    parent: Option<&Network>,
    test: &Dataset,
    severity: u32,
    seed: u64,
) -> Result<EnsembleEvaluation> {
    let noisy = corrupt(
        test,
        severity,
        &mut stream(seed, Purpose::Corrupt, severity as u64),
    )?;
    evaluate_ensemble(members, parent, &noisy)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptedResult {
    pub severity: u32,
    pub evaluation: EnsembleEvaluation,
}

/// Everything written to the ensemble summary JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub config: EnsembleConfig,
    pub seed: u64,
    pub members: Vec<MetricsRecord>,
    pub member_indices: Vec<usize>,
    pub failures: Vec<MemberFailure>,
    pub clean: EnsembleEvaluation,
    pub corrupted: Vec<CorruptedResult>,
    pub parent: Option<MetricsRecord>,
    pub wall_clock_seconds: f64,
}

/// Spawns, tunes and evaluates an ensemble from an already trained parent.
pub fn run_from_parent(
    parent: &Network,
    parent_record: Option<MetricsRecord>,
    cfg: &EnsembleConfig,
    split: &Split,
    seed: u64,
    threads: usize,
    severities: &[u32],
) -> Result<(TunedEnsemble, EnsembleSummary)> {
    let start = Instant::now();
    let children = spawn_children(parent, cfg, seed)?;
    let tuned = tune_children(children, cfg, split, seed, threads)?;
    if tuned.members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let nets: Vec<&Network> = tuned.members.iter().map(|m| &m.net).collect();
    let include = cfg.include_parent.then_some(parent);
    let clean = evaluate_ensemble(&nets, include, &split.test)?;
    let corrupted = severities
        .iter()
        .map(|&s| {
            Ok(CorruptedResult {
                severity: s,
                evaluation: evaluate_corrupted(&nets, include, &split.test, s, seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let members = tuned
        .members
        .iter()
        .zip(&clean.members)
        .map(|(m, metrics)| {
            let trail = m.outcome.records.iter().map(|r| r.train_loss).collect();
            let s = m.outcome.final_mask.as_ref().map_or(0.0, sparsity);
            MetricsRecord::new(*metrics, trail, s)
        })
        .collect();
    let summary = EnsembleSummary {
        config: cfg.clone(),
        seed,
        members,
        member_indices: tuned.members.iter().map(|m| m.index).collect(),
        failures: tuned.failures.clone(),
        clean,
        corrupted,
        parent: parent_record,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((tuned, summary))
}

/// Terminal masks of siblings `2k` and `2k + 1` share no active entry.
pub fn partition_overlap(children: &[Child]) -> usize {
    children
        .chunks_exact(2)
        .map(|pair| pair[0].mask().overlap(pair[1].mask()))
        .sum()
}
