//! Experiment harness: configuration, dataset loading, parent caching, the
//! ablation sweep, ensembles, and metric/manifest output.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! manifest.json                  run manifest, written last
//! summary.csv                    ablate / prune-tune only
//! parent/seed-<s>.csv            parent training metrics
//! cells/<cell>/seed-<s>.csv      per-epoch tuning metrics
//! ensemble/seed-<s>/...          member CSVs, weights, masks, summary.json
//! eval.json                      eval task
//! ```

mod config;
mod summary;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    default_child, default_parent, default_tuning, EnsembleOptions, ExperimentConfig, Method,
    Overrides, Task,
};
pub use summary::{emit_summary, mean, read_summary, sample_std, write_summary, SummaryRow};

use crate::annealing::{Annealer, RandomAnnealConfig, TemperatureConfig};
use crate::container::{self, encode, encode_masks, network_records};
use crate::data::{data_root, Split};
use crate::ensemble::{
    evaluate_corrupted, evaluate_ensemble, run_from_parent, EnsembleEvaluation, EnsembleSummary,
    MetricsRecord,
};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::pruning::{make_iterative_schedule, one_shot_mask, PruneSpec};
use crate::rng::{stream, Purpose};
use crate::train::{fit, EpochRecord, SubnetworkPlan, TuneOutcome};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Member index used for every ablation cell's random streams; 0 is the
/// parent.
const CELL_MEMBER: u64 = 1;

/// One metrics file produced by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub method: String,
    pub selector: String,
    pub lr_schedule: String,
    pub sparsity: f64,
    pub phi: Option<usize>,
    pub tau0: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    /// Relative to the output directory.
    pub metrics_file: PathBuf,
    pub final_metrics: Option<EpochRecord>,
    /// Whether the entry is a pruning cell that belongs in the summary.
    pub summarize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub stage: String,
    pub seed: Option<u64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunEntry>,
    pub failures: Vec<RunFailure>,
    pub wall_clock_seconds: f64,
    pub library_version: String,
}

impl RunManifest {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A single point of an ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub sparsity: f64,
    pub phi: Option<usize>,
    pub tau0: Option<f64>,
}

impl Cell {
    pub fn id(&self, cfg: &ExperimentConfig) -> String {
        let mut id = format!(
            "{}_{}_{}_rho{}",
            self.method.name(),
            cfg.selector.name(),
            cfg.child_config().schedule.name(),
            self.sparsity
        );
        if let Some(p) = self.phi {
            id.push_str(&format!("_phi{p}"));
        }
        if let Some(t) = self.tau0 {
            id.push_str(&format!("_tau{t}"));
        }
        id
    }
}

/// Cross product of the configured methods and hyperparameters; `phi` and
/// `tau0` only vary for methods that use them.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &sparsity in &cfg.sparsity {
            let phis: Vec<Option<usize>> = if method.uses_phi() {
                cfg.phi.iter().map(|&p| Some(p)).collect()
            } else {
                vec![None]
            };
            let taus: Vec<Option<f64>> = if method.uses_tau0() {
                cfg.tau0.iter().map(|&t| Some(t)).collect()
            } else {
                vec![None]
            };
            for &phi in &phis {
                for &tau0 in &taus {
                    out.push(Cell {
                        method,
                        sparsity,
                        phi,
                        tau0,
                    });
                }
            }
        }
    }
    out
}

/// Loads the dataset from `$SSA_DATA_DIR` (or `./data`). Synthetic data is
/// generated from the first seed.
pub fn load_split(cfg: &ExperimentConfig) -> Result<Split> {
    let seed = cfg.seed_list()[0];
    cfg.dataset
        .load(&data_root(), &mut stream(seed, Purpose::Data, 0))
}

pub fn build_network(cfg: &ExperimentConfig, split: &Split, seed: u64) -> Result<Network> {
    let shape = split.train.sample_shape().to_vec();
    let specs = cfg.model.layers(&shape, split.train.num_classes);
    Network::new(&shape, &specs, &mut stream(seed, Purpose::Init, 0))
}

fn parent_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let key = serde_json::json!({
        "dataset": cfg.dataset,
        "data_seed": cfg.seed_list()[0],
        "model": cfg.model,
        "parent": cfg.parent_config(),
        "seed": seed,
        "version": LIBRARY_VERSION,
    });
    let digest = Sha256::digest(serde_json::to_vec(&key).expect("key serializes"));
    hex::encode(&digest[..12])
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_bytes(records: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record([
            "epoch",
            "train_loss",
            "test_acc",
            "test_nll",
            "test_ece",
            "realized_sparsity",
            "lr",
            "mean_active_fraction",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    container::write_file(path, &csv_bytes(records)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Trained parent for `seed`, loaded from the cache when present.
pub fn obtain_parent(
    cfg: &ExperimentConfig,
    split: &Split,
    seed: u64,
) -> Result<(Network, Vec<EpochRecord>)> {
    let dir = cfg.parent_cache_dir();
    create_dir(&dir)?;
    let key = parent_key(cfg, seed);
    let weights = dir.join(format!("{key}.ssam"));
    let metrics = dir.join(format!("{key}.csv"));
    let mut net = build_network(cfg, split, seed)?;
    if weights.exists() && metrics.exists() {
        let records = container::decode(&container::read_file(&weights)?, &weights)?;
        container::load_network_params(&mut net, &records)?;
        log::info!("seed {seed}: parent loaded from {}", weights.display());
        return Ok((net, read_metrics_csv(&metrics)?));
    }
    log::info!(
        "seed {seed}: training parent for {} epochs",
        cfg.parent_config().epochs
    );
    let outcome = fit(
        &mut net,
        &split.train,
        &split.test,
        &cfg.parent_config(),
        seed,
        0,
    )?;
    write_metrics_csv(&metrics, &outcome.records)?;
    container::write_file(&weights, &encode(&network_records(&net)))?;
    Ok((net, outcome.records))
}

/// Builds the subnetwork plan for one ablation cell from a trained parent.
pub fn plan_for(
    cfg: &ExperimentConfig,
    cell: &Cell,
    parent: &Network,
    seed: u64,
) -> Result<SubnetworkPlan> {
    let shapes = parent.weight_shapes();
    let spec = PruneSpec {
        selector: cfg.selector,
        granularity: cfg.granularity,
        target_sparsity: cell.sparsity,
    };
    let phi = cell.phi.unwrap_or(0);
    let decay = cfg.anneal_decay.unwrap_or(cell.method.default_decay());
    let one_shot = || {
        one_shot_mask(
            &shapes,
            &parent.weights(),
            &spec,
            &mut stream(seed, Purpose::Mask, CELL_MEMBER),
        )
    };
    Ok(match cell.method {
        Method::Oneshot => SubnetworkPlan::Fixed(one_shot()?),
        Method::Iterative => SubnetworkPlan::Iterative {
            schedule: make_iterative_schedule(cell.sparsity, phi)?,
            selector: cfg.selector,
            granularity: cfg.granularity,
        },
        Method::TemperatureAnneal => {
            let tcfg = TemperatureConfig {
                tau0: cell.tau0.unwrap_or(0.5),
                variant: cfg.variant,
                decay,
                epochs: phi,
            };
            SubnetworkPlan::Annealed {
                annealer: Annealer::temperature(&one_shot()?, &tcfg)?,
                eval: cfg.eval_mask,
            }
        }
        Method::RandomAnneal => {
            let rcfg = RandomAnnealConfig {
                distribution: cfg.random_init,
                sparsity: cell.sparsity,
                decay,
                epochs: phi,
            };
            let mut rng = stream(seed, Purpose::AnnealInit, CELL_MEMBER);
            SubnetworkPlan::Annealed {
                annealer: Annealer::random(&shapes, &rcfg, &mut rng)?,
                eval: cfg.eval_mask,
            }
        }
    })
}

/// Tunes one cell for one seed starting from `parent`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    parent: &Network,
    split: &Split,
    seed: u64,
) -> Result<(Network, TuneOutcome)> {
    let plan = plan_for(cfg, cell, parent, seed)?;
    let mut net = parent.clone();
    let outcome = crate::train::tune(
        &mut net,
        plan,
        &split.train,
        &split.test,
        &cfg.child_config(),
        seed,
        CELL_MEMBER,
    )?;
    Ok((net, outcome))
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    split: &'a Split,
    out: &'a Path,
    runs: Vec<RunEntry>,
    failures: Vec<RunFailure>,
}

impl Ctx<'_> {
    fn entry(
        &self,
        method: &str,
        seed: u64,
        file: PathBuf,
        records: &[EpochRecord],
        train: &crate::train::TrainConfig,
    ) -> RunEntry {
        RunEntry {
            method: method.to_string(),
            selector: self.cfg.selector.name().to_string(),
            lr_schedule: train.schedule.name().to_string(),
            sparsity: 0.0,
            phi: None,
            tau0: None,
            seed,
            epochs: train.epochs,
            metrics_file: file,
            final_metrics: records.last().copied(),
            summarize: false,
        }
    }

    fn fail(&mut self, stage: String, seed: Option<u64>, e: &Error) {
        log::error!("{stage} (seed {seed:?}) failed: {e}");
        self.failures.push(RunFailure {
            stage,
            seed,
            error: e.to_string(),
        });
    }

    /// Parents for every seed, recording their metrics; seeds whose parent
    /// fails are dropped.
    fn parents(&mut self) -> Result<Vec<(u64, Network, Vec<EpochRecord>)>> {
        let mut out = Vec::new();
        for seed in self.cfg.seed_list() {
            match obtain_parent(self.cfg, self.split, seed) {
                Ok((net, records)) => {
                    let rel = PathBuf::from(format!("parent/seed-{seed}.csv"));
                    write_metrics_csv(&self.out.join(&rel), &records)?;
                    let e = self.entry("parent", seed, rel, &records, &self.cfg.parent_config());
                    self.runs.push(e);
                    out.push((seed, net, records));
                }
                Err(e) => self.fail("parent".into(), Some(seed), &e),
            }
        }
        Ok(out)
    }

    fn train_parents(&mut self) -> Result<()> {
        for (seed, net, _) in self.parents()? {
            let path = self.out.join(format!("parent/seed-{seed}.weights.ssam"));
            container::write_file(&path, &encode(&network_records(&net)))?;
        }
        Ok(())
    }

    fn ablate(&mut self) -> Result<()> {
        let parents = self.parents()?;
        let cells = cells(self.cfg);
        let jobs: Vec<(usize, &Cell, u64, &Network)> = cells
            .iter()
            .enumerate()
            .flat_map(|(i, c)| parents.iter().map(move |(s, n, _)| (i, c, *s, n)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.worker_threads())
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        let (cfg, split, out) = (self.cfg, self.split, self.out);
        let results: Vec<(usize, &Cell, u64, Result<RunEntry>)> = pool.install(|| {
            jobs.into_par_iter()
                .map(|(i, cell, seed, parent)| {
                    (
                        i,
                        cell,
                        seed,
                        run_and_write(cfg, cell, parent, split, seed, out),
                    )
                })
                .collect()
        });
        for (_, cell, seed, r) in results {
            match r {
                Ok(e) => self.runs.push(e),
                Err(e) => self.fail(cell.id(self.cfg), Some(seed), &e),
            }
        }
        let manifest_view = RunManifest {
            config_hash: String::new(),
            config: self.cfg.clone(),
            dataset: self.cfg.dataset.name().into(),
            seeds: vec![],
            runs: self.runs.clone(),
            failures: vec![],
            wall_clock_seconds: 0.0,
            library_version: LIBRARY_VERSION.into(),
        };
        write_summary(
            &self.out.join("summary.csv"),
            &emit_summary(&[manifest_view])?,
        )
    }

    fn ensemble(&mut self) -> Result<()> {
        let parents = self.parents()?;
        let ecfg = self.cfg.ensemble_config();
        let mut summaries = Vec::new();
        for (seed, parent, records) in parents {
            let dir = self.out.join(format!("ensemble/seed-{seed}"));
            create_dir(&dir)?;
            let parent_metrics = evaluate_ensemble(&[&parent], None, &self.split.test)?.ensemble;
            let trail = records.iter().map(|r| r.train_loss).collect();
            let record = MetricsRecord::new(parent_metrics, trail, 0.0);
            let result = run_from_parent(
                &parent,
                Some(record),
                &ecfg,
                self.split,
                seed,
                self.cfg.worker_threads(),
                &self.cfg.corruption_severities,
            );
            let (tuned, summary) = match result {
                Ok(r) => r,
                Err(e) => {
                    self.fail("ensemble".into(), Some(seed), &e);
                    continue;
                }
            };
            for f in &tuned.failures {
                self.failures.push(RunFailure {
                    stage: format!("ensemble member {}", f.index),
                    seed: Some(seed),
                    error: f.error.clone(),
                });
            }
            for m in &tuned.members {
                let rel = PathBuf::from(format!("ensemble/seed-{seed}/member-{}.csv", m.index));
                write_metrics_csv(&self.out.join(&rel), &m.outcome.records)?;
                container::write_file(
                    &dir.join(format!("member-{}.weights.ssam", m.index)),
                    &encode(&network_records(&m.net)),
                )?;
                if let Some(mask) = &m.outcome.final_mask {
                    container::write_file(
                        &dir.join(format!("member-{}.mask.ssam", m.index)),
                        &encode_masks(mask),
                    )?;
                }
                let mut e = self.entry(
                    "ensemble-member",
                    seed,
                    rel,
                    &m.outcome.records,
                    &ecfg.child,
                );
                e.sparsity = ecfg.sparsity;
                e.phi = Some(ecfg.anneal_epochs);
                e.tau0 = Some(ecfg.tau0);
                self.runs.push(e);
            }
            write_json(&dir.join("summary.json"), &summary)?;
            summaries.push(summary);
        }
        write_json(&self.out.join("ensemble_summary.json"), &summaries)
    }

    fn eval(&mut self) -> Result<()> {
        let seed = self.cfg.seed_list()[0];
        let mut nets = Vec::new();
        for path in &self.cfg.weights {
            let mut net = build_network(self.cfg, self.split, seed)?;
            let records = container::decode(&container::read_file(path)?, path)?;
            container::load_network_params(&mut net, &records)?;
            nets.push(net);
        }
        let refs: Vec<&Network> = nets.iter().collect();
        let clean = evaluate_ensemble(&refs, None, &self.split.test)?;
        let corrupted = self
            .cfg
            .corruption_severities
            .iter()
            .map(|&s| {
                Ok((
                    s,
                    evaluate_corrupted(&refs, None, &self.split.test, s, seed)?,
                ))
            })
            .collect::<Result<Vec<(u32, EnsembleEvaluation)>>>()?;
        let report = EvalReport {
            weights: self.cfg.weights.clone(),
            clean,
            corrupted: corrupted
                .into_iter()
                .map(|(severity, evaluation)| crate::ensemble::CorruptedResult {
                    severity,
                    evaluation,
                })
                .collect(),
        };
        write_json(&self.out.join("eval.json"), &report)
    }
}

/// Output of the `eval` task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub weights: Vec<PathBuf>,
    pub clean: EnsembleEvaluation,
    pub corrupted: Vec<crate::ensemble::CorruptedResult>,
}

fn run_and_write(
    cfg: &ExperimentConfig,
    cell: &Cell,
    parent: &Network,
    split: &Split,
    seed: u64,
    out: &Path,
) -> Result<RunEntry> {
    let id = cell.id(cfg);
    log::info!("seed {seed}: tuning {id}");
    let (net, outcome) = run_cell(cfg, cell, parent, split, seed)?;
    let rel = PathBuf::from(format!("cells/{id}/seed-{seed}.csv"));
    write_metrics_csv(&out.join(&rel), &outcome.records)?;
    if cfg.save_weights {
        let dir = out.join(format!("cells/{id}"));
        container::write_file(
            &dir.join(format!("seed-{seed}.weights.ssam")),
            &encode(&network_records(&net)),
        )?;
        if let Some(mask) = &outcome.final_mask {
            container::write_file(
                &dir.join(format!("seed-{seed}.mask.ssam")),
                &encode_masks(mask),
            )?;
        }
    }
    let child = cfg.child_config();
    Ok(RunEntry {
        method: cell.method.name().to_string(),
        selector: cfg.selector.name().to_string(),
        lr_schedule: child.schedule.name().to_string(),
        sparsity: cell.sparsity,
        phi: cell.phi,
        tau0: cell.tau0,
        seed,
        epochs: child.epochs,
        metrics_file: rel,
        final_metrics: outcome.last().copied(),
        summarize: true,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    container::write_file(path, &bytes)
}

/// Runs the experiment and writes its manifest. Stage failures are recorded
/// in the manifest; check [`RunManifest::succeeded`].
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    match load_split(cfg) {
        Ok(split) => {
            let mut ctx = Ctx {
                cfg,
                split: &split,
                out: &out,
                runs: Vec::new(),
                failures: Vec::new(),
            };
            let result = match cfg.task {
                Task::TrainParent => ctx.train_parents(),
                Task::Ablate | Task::PruneTune => ctx.ablate(),
                Task::Ensemble => ctx.ensemble(),
                Task::Eval => ctx.eval(),
            };
            if let Err(e) = result {
                ctx.fail(format!("{:?}", cfg.task).to_lowercase(), None, &e);
            }
            runs = ctx.runs;
            failures = ctx.failures;
        }
        Err(e) => {
            log::error!("dataset load failed: {e}");
            failures.push(RunFailure {
                stage: "dataset".into(),
                seed: None,
                error: e.to_string(),
            });
        }
    }
    runs.sort_by(|a, b| (&a.metrics_file, a.seed).cmp(&(&b.metrics_file, b.seed)));
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        dataset: cfg.dataset.name().into(),
        seeds: cfg.seed_list(),
        runs,
        failures,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        library_version: LIBRARY_VERSION.into(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads every `manifest.json` directly in `dir` or one level below it.
pub fn collect_manifests(dir: &Path) -> Result<Vec<RunManifest>> {
    let mut paths = vec![dir.join("manifest.json")];
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    paths.extend(subdirs.into_iter().map(|d| d.join("manifest.json")));
    paths
        .into_iter()
        .filter(|p| p.exists())
        .map(|p| RunManifest::load(&p))
        .collect()
}

/// Writes `<dir>/summary.csv` from the manifests found in `dir`.
pub fn summarize_dir(dir: &Path) -> Result<Vec<SummaryRow>> {
    let manifests = collect_manifests(dir)?;
    if manifests.is_empty() {
        return Err(Error::invalid(format!(
            "no manifest.json found in {}",
            dir.display()
        )));
    }
    let rows = emit_summary(&manifests)?;
    write_summary(&dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

/// Across-seed aggregate of ensemble summaries.
pub fn ensemble_summaries(out_dir: &Path) -> Result<Vec<EnsembleSummary>> {
    let path = out_dir.join("ensemble_summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
