use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunManifest;
use crate::error::{Error, Result};

/// One summary row: a cell's final test metrics aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub selector: String,
    pub lr_schedule: String,
    pub rho: f64,
    pub phi: Option<usize>,
    pub tau0: Option<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_nll: f64,
    pub mean_ece: f64,
    pub epochs: usize,
    pub seed_count: usize,
    /// 1 for the highest `mean_acc` among rows sharing method, selector,
    /// schedule and `rho`.
    pub best: u8,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1`); 0 for a single value.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Default)]
struct Acc {
    acc: Vec<f64>,
    nll: Vec<f64>,
    ece: Vec<f64>,
    epochs: usize,
}

/// Aggregates the pruning cells of `manifests` (all from one dataset).
pub fn emit_summary(manifests: &[RunManifest]) -> Result<Vec<SummaryRow>> {
    if let Some(first) = manifests.first() {
        if let Some(other) = manifests.iter().find(|m| m.dataset != first.dataset) {
            return Err(Error::invalid(format!(
                "cannot summarize runs on different datasets ({} and {})",
                first.dataset, other.dataset
            )));
        }
    }
    type Key = (String, String, String, u64, Option<usize>, Option<u64>);
    let mut groups: BTreeMap<Key, Acc> = BTreeMap::new();
    for entry in manifests.iter().flat_map(|m| &m.runs) {
        let Some(last) = entry.final_metrics.filter(|_| entry.summarize) else {
            continue;
        };
        let key = (
            entry.method.clone(),
            entry.selector.clone(),
            entry.lr_schedule.clone(),
            entry.sparsity.to_bits(),
            entry.phi,
            entry.tau0.map(f64::to_bits),
        );
        let g = groups.entry(key).or_default();
        g.acc.push(last.test_acc);
        g.nll.push(last.test_nll);
        g.ece.push(last.test_ece);
        g.epochs = entry.epochs;
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(
            |((method, selector, lr_schedule, rho, phi, tau0), g)| SummaryRow {
                method,
                selector,
                lr_schedule,
                rho: f64::from_bits(rho),
                phi,
                tau0: tau0.map(f64::from_bits),
                mean_acc: mean(&g.acc),
                std_acc: sample_std(&g.acc),
                mean_nll: mean(&g.nll),
                mean_ece: mean(&g.ece),
                epochs: g.epochs,
                seed_count: g.acc.len(),
                best: 0,
            },
        )
        .collect();
    let mut best: BTreeMap<(String, String, String, u64), (usize, f64)> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let key = (
            r.method.clone(),
            r.selector.clone(),
            r.lr_schedule.clone(),
            r.rho.to_bits(),
        );
        let e = best.entry(key).or_insert((i, r.mean_acc));
        if r.mean_acc > e.1 {
            *e = (i, r.mean_acc);
        }
    }
    for (i, _) in best.into_values() {
        rows[i].best = 1;
    }
    Ok(rows)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "method",
            "selector",
            "lr_schedule",
            "rho",
            "phi",
            "tau0",
            "mean_acc",
            "std_acc",
            "mean_nll",
            "mean_ece",
            "epochs",
            "seed_count",
            "best",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    crate::container::write_file(path, &bytes)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
