//! Training loops: dense training and subnetwork tuning under a fixed,
//! iteratively pruned, or annealed mask.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annealing::Annealer;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::{
    apply_expected_all, finalize, mask_in_place, realize, sparsity, Granularity, MaskSet,
};
use crate::metrics::{evaluate, Metrics};
use crate::nn::{
    cross_entropy_softmax, softmax, Network, Optimizer, OptimizerConfig, ScheduleConfig, StepUnit,
};
use crate::pruning::{prune_increment, IterativeSchedule, Selector};
use crate::rng::{stream, Purpose, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 128;
const EVAL_BATCH: usize = 1000;

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One row of a metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub test_nll: f64,
    pub test_ece: f64,
    pub realized_sparsity: f64,
    pub lr: f64,
    pub mean_active_fraction: f64,
}

/// Which weights are used to evaluate during the stochastic phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMask {
    #[default]
    Terminal,
    Expected,
}

/// How the subnetwork evolves during tuning.
#[derive(Debug, Clone)]
pub enum SubnetworkPlan {
    Dense,
    Fixed(MaskSet),
    /// Starts from the full network and prunes to the next level at the
    /// start of each of the first `schedule.epochs()` epochs, selecting
    /// against the current weights.
    Iterative {
        schedule: IterativeSchedule,
        selector: Selector,
        granularity: Granularity,
    },
    Annealed {
        annealer: Annealer,
        eval: EvalMask,
    },
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub records: Vec<EpochRecord>,
    /// Mask the network was finalized with; `None` for dense training.
    pub final_mask: Option<MaskSet>,
}

impl TuneOutcome {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Softmax probabilities over `data` using `weights` in place of the stored
/// weights when given.
pub fn predict_probs(net: &Network, weights: Option<&[Tensor]>, data: &Dataset) -> Result<Tensor> {
    Ok(softmax(&net.infer_batched(
        &data.features,
        weights,
        EVAL_BATCH,
    )?))
}

pub fn logits(net: &Network, data: &Dataset) -> Result<Tensor> {
    net.infer_batched(&data.features, None, EVAL_BATCH)
}

pub fn evaluate_network(
    net: &Network,
    weights: Option<&[Tensor]>,
    data: &Dataset,
) -> Result<Metrics> {
    evaluate(&predict_probs(net, weights, data)?, &data.labels)
}

/// [`evaluate_network`] with weights `W ∘ M`.
pub fn evaluate_masked(net: &Network, mask: &MaskSet, data: &Dataset) -> Result<Metrics> {
    let logits = net.infer_batched_masked(&data.features, mask, EVAL_BATCH)?;
    evaluate(&softmax(&logits), &data.labels)
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Divergence {
            epoch,
            batch,
            loss: f64::NAN,
        },
        other => other,
    }
}

struct Streams {
    shuffle: Rng,
    bernoulli: Rng,
    mask: Rng,
}

/// Trains `net` on `train` under `plan`, evaluating on `test` after every
/// epoch; masked plans finalize the weights at the end.
///
/// Random streams come from `(seed, member)`: shuffling, per-batch Bernoulli
/// draws and iterative pruning each use their own stream.
pub fn tune(
    net: &mut Network,
    plan: SubnetworkPlan,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    member: u64,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    let shapes = net.weight_shapes();
    match &plan {
        SubnetworkPlan::Dense => {}
        SubnetworkPlan::Fixed(mask) => mask.check_against(&net.weights())?,
        SubnetworkPlan::Iterative { schedule, .. } => {
            if schedule.epochs() > cfg.epochs {
                return Err(Error::Config(format!(
                    "{} pruning epochs exceed the {} tuning epochs",
                    schedule.epochs(),
                    cfg.epochs
                )));
            }
        }
        SubnetworkPlan::Annealed { annealer, .. } => {
            annealer.terminal().check_against(&net.weights())?;
            if annealer.epochs > cfg.epochs {
                return Err(Error::Config(format!(
                    "{} annealing epochs exceed the {} tuning epochs",
                    annealer.epochs, cfg.epochs
                )));
            }
        }
    }
    let n = train.len();
    if n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = cfg.schedule.resolve(cfg.epochs, steps_per_epoch)?;
    let mut optimizer = Optimizer::new(cfg.optimizer)?;
    let mut rngs = Streams {
        shuffle: stream(seed, Purpose::Shuffle, member),
        bernoulli: stream(seed, Purpose::Bernoulli, member),
        mask: stream(seed, Purpose::Mask, member),
    };
    let mut current = match &plan {
        SubnetworkPlan::Fixed(m) => Some(m.clone()),
        SubnetworkPlan::Iterative { .. } => Some(MaskSet::ones(&shapes)),
        _ => None,
    };
    let total = shapes
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum::<usize>()
        .max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let probs = match &plan {
            SubnetworkPlan::Annealed { annealer, .. } => Some(annealer.probs_at_epoch(epoch)),
            _ => None,
        };
        if let SubnetworkPlan::Iterative {
            schedule,
            selector,
            granularity,
        } = &plan
        {
            if let Some(level) = schedule.level_at(epoch) {
                let mask = current.as_ref().expect("iterative mask");
                let next = prune_increment(
                    mask,
                    level,
                    *selector,
                    *granularity,
                    &net.weights(),
                    &mut rngs.mask,
                )?;
                current = Some(next);
            }
        }

        order.shuffle(&mut rngs.shuffle);
        let mut loss_sum = 0.0;
        let mut active_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = schedule.lr_at(0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            lr = match schedule.unit() {
                StepUnit::Epoch => schedule.lr_at(epoch),
                StepUnit::Step => schedule.lr_at(step),
            };
            let (x, y) = train.batch(idx);
            let realized;
            let mask = match (&probs, &current) {
                (Some(p), _) => {
                    realized = realize(p, &mut rngs.bernoulli);
                    Some(&realized)
                }
                (None, Some(m)) => Some(m),
                (None, None) => None,
            };
            let out = match mask {
                Some(m) => net.forward_masked(&x, m),
                None => net.forward(&x, None),
            }
            .map_err(diverged(epoch, b))?;
            let (loss, grad) = cross_entropy_softmax(&out, &y).map_err(diverged(epoch, b))?;
            let grads = net.backward(&grad)?;
            let mut grad_tensors: Vec<Tensor> = Vec::with_capacity(grads.layers.len() * 2);
            for (i, mut g) in grads.layers.into_iter().enumerate() {
                if let Some(m) = mask {
                    mask_in_place(&mut g.weight, &m.layers[i])?;
                }
                grad_tensors.push(g.weight);
                grad_tensors.extend(g.bias);
            }
            let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
            optimizer.step(&mut net.params_mut(), &grad_refs, lr)?;
            if net.params().iter().any(|p| !p.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;
            active_sum += mask.map_or(1.0, |m| m.active() as f64 / total as f64);
            batches += 1;
            step += 1;
        }

        let (m, eval_sparsity) = match (&plan, &current, &probs) {
            (SubnetworkPlan::Annealed { eval, .. }, _, Some(p)) => {
                let m = match eval {
                    EvalMask::Terminal => evaluate_masked(net, &p.terminal, test)?,
                    EvalMask::Expected => {
                        let w = apply_expected_all(&net.weights(), p)?;
                        evaluate_network(net, Some(&w), test)?
                    }
                };
                (m, sparsity(&p.terminal))
            }
            (_, Some(m), _) => (evaluate_masked(net, m, test)?, sparsity(m)),
            _ => (evaluate_network(net, None, test)?, 0.0),
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            test_acc: m.accuracy,
            test_nll: m.nll,
            test_ece: m.ece,
            realized_sparsity: eval_sparsity,
            lr,
            mean_active_fraction: active_sum / batches.max(1) as f64,
        };
        log::debug!(
            "epoch {}: loss {:.5} acc {:.4} nll {:.4} sparsity {:.4}",
            record.epoch,
            record.train_loss,
            record.test_acc,
            record.test_nll,
            record.realized_sparsity
        );
        records.push(record);
    }

    let final_mask = match plan {
        SubnetworkPlan::Dense => None,
        SubnetworkPlan::Annealed { annealer, .. } => Some(annealer.terminal().clone()),
        _ => current,
    };
    if let Some(m) = &final_mask {
        finalize(&mut net.weights_mut(), m)?;
    }
    Ok(TuneOutcome {
        records,
        final_mask,
    })
}

/// Dense training, as used for parents.
pub fn fit(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    member: u64,
) -> Result<TuneOutcome> {
    tune(net, SubnetworkPlan::Dense, train, test, cfg, seed, member)
}
