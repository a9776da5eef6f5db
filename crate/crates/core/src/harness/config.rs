use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annealing::{DecayShape, InitDistribution, TemperatureVariant};
use crate::data::DatasetSpec;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::masking::Granularity;
use crate::nn::{Architecture, OptimizerConfig, ScheduleConfig};
use crate::pruning::Selector;
use crate::train::{EvalMask, TrainConfig, DEFAULT_BATCH_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Ablate,
    TrainParent,
    PruneTune,
    Ensemble,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Oneshot,
    Iterative,
    RandomAnneal,
    TemperatureAnneal,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Oneshot => "oneshot",
            Method::Iterative => "iterative",
            Method::RandomAnneal => "random-anneal",
            Method::TemperatureAnneal => "temperature-anneal",
        }
    }

    pub fn uses_phi(self) -> bool {
        self != Method::Oneshot
    }

    pub fn uses_tau0(self) -> bool {
        self == Method::TemperatureAnneal
    }

    /// Cosine for temperature annealing, linear otherwise.
    pub fn default_decay(self) -> DecayShape {
        match self {
            Method::TemperatureAnneal => DecayShape::Cosine,
            _ => DecayShape::Linear,
        }
    }
}

/// Ensemble settings; budgets for parent and children come from the
/// experiment's `parent` and `child` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleOptions {
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default = "default_anneal_epochs")]
    pub anneal_epochs: usize,
    #[serde(default = "half")]
    pub sparsity: f64,
    #[serde(default = "half")]
    pub tau0: f64,
    #[serde(default = "default_variant")]
    pub variant: TemperatureVariant,
    #[serde(default = "default_cosine")]
    pub decay: DecayShape,
    #[serde(default = "yes")]
    pub partitioning: bool,
    #[serde(default)]
    pub include_parent: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            members: default_members(),
            anneal_epochs: default_anneal_epochs(),
            sparsity: 0.5,
            tau0: 0.5,
            variant: default_variant(),
            decay: DecayShape::Cosine,
            partitioning: true,
            include_parent: false,
        }
    }
}

fn default_members() -> usize {
    6
}
fn default_anneal_epochs() -> usize {
    3
}
fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}
fn default_variant() -> TemperatureVariant {
    TemperatureVariant::ReverseDropout
}
fn default_cosine() -> DecayShape {
    DecayShape::Cosine
}
fn default_model() -> Architecture {
    Architecture::Mlp
}
fn default_methods() -> Vec<Method> {
    vec![Method::Oneshot]
}
fn default_selector() -> Selector {
    Selector::RandomUnstructured
}
fn default_granularity() -> Granularity {
    Granularity::Layerwise
}
fn default_sparsity() -> Vec<f64> {
    vec![0.9]
}
fn default_phi() -> Vec<usize> {
    vec![5]
}
fn default_tau0() -> Vec<f64> {
    vec![0.5]
}
fn default_random_init() -> InitDistribution {
    InitDistribution::Uniform
}
fn default_repeats() -> usize {
    1
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_threads() -> usize {
    1
}
fn default_severities() -> Vec<u32> {
    vec![1, 2, 3, 4, 5]
}

/// Parent training: 10 epochs, Nesterov SGD, 0.1 held for half the budget
/// then decayed linearly to 0.001 at 90%.
pub fn default_parent() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: DEFAULT_BATCH_SIZE,
        optimizer: OptimizerConfig::nesterov_sgd(),
        schedule: ScheduleConfig::parent_default(),
    }
}

/// Subnetwork tuning for ablations: 20 epochs at a constant 0.01.
pub fn default_tuning() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: DEFAULT_BATCH_SIZE,
        optimizer: OptimizerConfig::nesterov_sgd(),
        schedule: ScheduleConfig::constant(0.01),
    }
}

/// Ensemble children: 10 epochs of one-cycle.
pub fn default_child() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: DEFAULT_BATCH_SIZE,
        optimizer: OptimizerConfig::nesterov_sgd(),
        schedule: ScheduleConfig::child_one_cycle(),
    }
}

/// One experiment, read from a JSON file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub dataset: DatasetSpec,
    #[serde(default = "default_model")]
    pub model: Architecture,
    /// Defaults to [`default_parent`].
    #[serde(default)]
    pub parent: Option<TrainConfig>,
    /// Defaults to [`default_tuning`], or [`default_child`] for ensembles.
    #[serde(default)]
    pub child: Option<TrainConfig>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_selector")]
    pub selector: Selector,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_sparsity")]
    pub sparsity: Vec<f64>,
    #[serde(default = "default_phi")]
    pub phi: Vec<usize>,
    #[serde(default = "default_tau0")]
    pub tau0: Vec<f64>,
    #[serde(default = "default_variant")]
    pub variant: TemperatureVariant,
    /// Overrides the per-method decay shape.
    #[serde(default)]
    pub anneal_decay: Option<DecayShape>,
    #[serde(default = "default_random_init")]
    pub random_init: InitDistribution,
    #[serde(default)]
    pub eval_mask: EvalMask,
    #[serde(default)]
    pub ensemble: EnsembleOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Explicit seed list; replaces `seed` and `repeats` when present.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// Directory of trained parents shared between runs; defaults to
    /// `<out_dir>/parents`.
    #[serde(default)]
    pub parent_cache: Option<PathBuf>,
    #[serde(default = "default_severities")]
    pub corruption_severities: Vec<u32>,
    /// Network weight files evaluated by the `eval` task.
    #[serde(default)]
    pub weights: Vec<PathBuf>,
    /// Write tuned subnetwork weights and masks for `ablate` and
    /// `prune-tune`.
    #[serde(default)]
    pub save_weights: bool,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    /// Minimal config for `task` on `dataset`; everything else defaulted.
    pub fn new(task: Task, dataset: DatasetSpec) -> Self {
        let json = serde_json::json!({ "task": task, "dataset": dataset });
        serde_json::from_value(json).expect("defaults are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.seeds = None;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if o.deterministic {
            self.deterministic = true;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.repeats as u64).map(|i| self.seed + i).collect(),
        }
    }

    /// Worker threads actually used; 1 in deterministic mode.
    pub fn worker_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }

    pub fn parent_config(&self) -> TrainConfig {
        self.parent.clone().unwrap_or_else(default_parent)
    }

    pub fn child_config(&self) -> TrainConfig {
        self.child.clone().unwrap_or_else(|| match self.task {
            Task::Ensemble => default_child(),
            _ => default_tuning(),
        })
    }

    pub fn parent_cache_dir(&self) -> PathBuf {
        self.parent_cache
            .clone()
            .unwrap_or_else(|| self.out_dir.join("parents"))
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        let e = &self.ensemble;
        EnsembleConfig {
            members: e.members,
            parent: self.parent_config(),
            child: self.child_config(),
            anneal_epochs: e.anneal_epochs,
            sparsity: e.sparsity,
            tau0: e.tau0,
            variant: e.variant,
            decay: e.decay,
            partitioning: e.partitioning,
            include_parent: e.include_parent,
            granularity: self.granularity,
        }
    }

    /// Lowercase hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Checks every field before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.dataset.validate()?;
        self.parent_config().validate()?;
        self.child_config().validate()?;
        if self.seed_list().is_empty() {
            return bad(
                "at least one seed is required (repeats >= 1 or a nonempty seeds list)".into(),
            );
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if let Some(&s) = self.sparsity.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return bad(format!("sparsity {s} outside [0, 1)"));
        }
        if let Some(&t) = self.tau0.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("tau0 {t} outside [0, 1]"));
        }
        if let Some(&s) = self.corruption_severities.iter().find(|&&s| s == 0) {
            return bad(format!("corruption severity {s} must be at least 1"));
        }
        if let InitDistribution::Bimodal {
            sigma_pruned,
            sigma_kept,
            ..
        } = self.random_init
        {
            if !(sigma_pruned > 0.0 && sigma_kept > 0.0) {
                return bad("bimodal standard deviations must be positive".into());
            }
        }
        match self.task {
            Task::Ablate | Task::PruneTune => {
                if self.methods.is_empty() || self.sparsity.is_empty() {
                    return bad("methods and sparsity lists must be nonempty".into());
                }
                if self.methods.iter().any(|m| m.uses_phi()) && self.phi.is_empty() {
                    return bad("phi list must be nonempty".into());
                }
                let child_epochs = self.child_config().epochs;
                if let Some(&p) = self.phi.iter().find(|&&p| p > child_epochs) {
                    return bad(format!("phi {p} exceeds the {child_epochs} tuning epochs"));
                }
                if self.methods.contains(&Method::Iterative) && self.phi.contains(&0) {
                    return bad("iterative pruning needs phi >= 1".into());
                }
                if self.methods.contains(&Method::TemperatureAnneal) && self.tau0.is_empty() {
                    return bad("tau0 list must be nonempty".into());
                }
                if self.task == Task::PruneTune
                    && (self.methods.len() != 1
                        || self.sparsity.len() != 1
                        || self.phi.len() > 1
                        || self.tau0.len() > 1)
                {
                    return bad("prune-tune takes a single method, sparsity, phi and tau0; use ablate for sweeps".into());
                }
            }
            Task::Ensemble => self.ensemble_config().validate()?,
            Task::Eval => {
                if self.weights.is_empty() {
                    return bad("eval needs at least one weight file in `weights`".into());
                }
            }
            Task::TrainParent => {}
        }
        Ok(())
    }
}
