//! Analysis dumps of a trained model: effective filter amplitudes per
//! user and mean gate probabilities per band.

use std::path::Path;

use log::warn;
use muffin_core::data::{make_batches, SequenceBatch, SequenceDataset, Split};
use muffin_core::model::{filter_amplitudes, mean_gates, ModelParams};
use muffin_core::stats::Welford;
use serde::Serialize;

use crate::error::{bail, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterRow {
    pub user: String,
    pub branch: &'static str,
    pub bin: usize,
    pub amplitude: f64,
    /// Mean and population std of this (branch, bin) over the dumped users.
    pub bin_mean: f64,
    pub bin_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterDump {
    pub users: Vec<String>,
    pub rows: Vec<FilterRow>,
}

impl FilterDump {
    /// Cross-user std per bin of one branch, in bin order.
    pub fn bin_std(&self, branch: &str) -> Vec<f64> {
        let first = self.users.first();
        self.rows
            .iter()
            .filter(|r| r.branch == branch && Some(&r.user) == first)
            .map(|r| r.bin_std)
            .collect()
    }
}

/// Filter amplitudes at `layer` for each user in `users`, with each user's
/// full history as context. Unknown users are skipped with a warning.
pub fn inspect_filters(params: &ModelParams, ds: &SequenceDataset, users: &[String], layer: usize) -> Result<FilterDump> {
    let mut examples = Vec::new();
    let mut kept = Vec::new();
    for u in users {
        match ds.user_index(u).and_then(|i| ds.example(i, Split::Test)) {
            Some(ex) => {
                examples.push(ex);
                kept.push(u.clone());
            }
            None => warn!("user {u:?} not in the dataset, skipped"),
        }
    }
    if kept.is_empty() {
        bail!(Data, "none of the requested users is in the dataset");
    }
    let batch = SequenceBatch::from_examples(&examples, params.config.n)?;
    let amps = filter_amplitudes(params, &batch, layer)?;
    let mut rows = Vec::new();
    for a in &amps {
        let stats: Vec<Welford> = (0..a.m)
            .map(|bin| {
                let mut w = Welford::default();
                (0..kept.len()).for_each(|u| w.push(a.values[u * a.m + bin]));
                w
            })
            .collect();
        for (u, user) in kept.iter().enumerate() {
            for (bin, s) in stats.iter().enumerate() {
                rows.push(FilterRow {
                    user: user.clone(),
                    branch: a.branch.name(),
                    bin,
                    amplitude: a.values[u * a.m + bin],
                    bin_mean: s.mean(),
                    bin_std: s.std(),
                });
            }
        }
    }
    Ok(FilterDump { users: kept, rows })
}

/// Mean gate probability per band and layer over the test split.
pub fn inspect_gates(params: &ModelParams, ds: &SequenceDataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    if !params.config.use_lfm {
        bail!(Config, "model has no local branch and therefore no gates");
    }
    let batches = make_batches(ds, params.config.n, batch_size, 0, Split::Test, false)?;
    Ok(mean_gates(params, &batches)?)
}

/// `max - min` of one row of mean gate probabilities.
pub fn gate_spread(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

pub fn write_filters(path: &Path, dump: &FilterDump) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in &dump.rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per layer: `layer,p0,..,p{K-1}`.
pub fn write_gates(path: &Path, gates: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    let k = gates.first().map_or(0, Vec::len);
    let mut header = vec!["layer".to_string()];
    header.extend((0..k).map(|t| format!("p{t}")));
    w.write_record(&header).map_err(io)?;
    for (l, row) in gates.iter().enumerate() {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(|p| p.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
