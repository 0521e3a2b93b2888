//! Training runs, multi-seed aggregation, ablations and sweeps.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use muffin_core::data::{SequenceDataset, Split};
use muffin_core::eval::{EvalReport, Metric, PopularityScorer, SeedSummary};
use muffin_core::model::ModelParams;
use muffin_core::stats::paired_t_test;
use muffin_core::training::{train_with, EpochRecord};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{bail, Error, Result};
use crate::parallel::{evaluate_model, evaluate_sharded, resolve_threads};

/// Result of training one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub stopped_early: bool,
    pub test: EvalReport,
    pub secs: f64,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Training curves as CSV, one row per epoch.
pub fn write_curves(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["epoch".to_string(), "rec".into(), "aux".into(), "bal".into(), "total".into()];
    if let Some(h) = history.first() {
        for k in &h.valid_ks {
            header.push(format!("valid_recall@{k}"));
            header.push(format!("valid_ndcg@{k}"));
        }
        header.extend((0..h.gate_mean.len()).map(|t| format!("gate_{t}")));
    }
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(io)?;
    for r in history {
        let mut row = vec![r.epoch.to_string()];
        row.extend([r.losses.rec, r.losses.aux, r.losses.bal, r.losses.total].map(|v| v.to_string()));
        for (rc, nd) in r.valid_recall.iter().zip(&r.valid_ndcg) {
            row.push(rc.to_string());
            row.push(nd.to_string());
        }
        row.extend(r.gate_mean.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains one seed with sharded validation and evaluates the best
/// parameters on the test split. With `out`, writes `history.jsonl`,
/// `curves.csv`, `best.ckpt` and `report.json` there.
pub fn train_seed(cfg: &RunConfig, ds: &SequenceDataset, seed: u64, out: Option<&Path>) -> Result<SeedRun> {
    let threads = resolve_threads(cfg.eval.threads);
    let mut train = cfg.train;
    train.seed = seed;
    let mut history_file = match out {
        Some(dir) => {
            create_dir(dir)?;
            Some((dir.join("history.jsonl"), create(&dir.join("history.jsonl"))?))
        }
        None => None,
    };
    let mut write_err = None;
    let start = Instant::now();
    let batch = train.eval_batch_size;
    let mut validator = |p: &ModelParams, ks: &[usize]| {
        evaluate_model(p, ds, Split::Valid, ks, batch, threads).map_err(|e| match e {
            Error::Core(c) => c,
            other => muffin_core::Error::Data(other.to_string()),
        })
    };
    let mut on_epoch = |r: &EpochRecord| {
        info!(
            "seed {seed} epoch {:>3}  loss {:.4} (rec {:.4} aux {:.4} bal {:.5})  valid ndcg@{} {:.4}{}",
            r.epoch,
            r.losses.total,
            r.losses.rec,
            r.losses.aux,
            r.losses.bal,
            train.valid_k,
            r.valid_metric,
            if r.improved { " *" } else { "" }
        );
        if let Some((path, w)) = history_file.as_mut() {
            let line = serde_json::to_string(r).expect("record serializes");
            if let Err(e) = writeln!(w, "{line}") {
                write_err.get_or_insert(Error::io(path, e));
            }
        }
    };
    let outcome = train_with(ds, &cfg.model, &train, &mut validator, &mut on_epoch)?;
    if let Some(e) = write_err {
        return Err(e);
    }
    if let Some((path, mut w)) = history_file {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let mut test = evaluate_model(&outcome.best, ds, Split::Test, &cfg.eval.ks, batch, threads)?;
    let secs = start.elapsed().as_secs_f64();
    test.seed = Some(seed);
    test.wall_clock_secs = Some(secs);
    if let Some(dir) = out {
        write_curves(&dir.join("curves.csv"), &outcome.history)?;
        checkpoint::save(&dir.join("best.ckpt"), &outcome.best)?;
        write_json(&dir.join("report.json"), &test)?;
    }
    Ok(SeedRun {
        seed,
        params: outcome.best,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_valid: outcome.best_metric,
        stopped_early: outcome.stopped_early,
        test,
        secs,
    })
}

/// Trains every configured seed under `out/seed-<s>` and writes
/// `summary.json` with the across-seed mean and standard deviation.
pub fn train_all(cfg: &RunConfig, ds: &SequenceDataset, out: &Path) -> Result<(Vec<SeedRun>, SeedSummary)> {
    cfg.echo(out)?;
    let mut runs = Vec::new();
    for seed in cfg.seeds() {
        runs.push(train_seed(cfg, ds, seed, Some(&out.join(format!("seed-{seed}"))))?);
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.test.clone()).collect();
    let summary = SeedSummary::new(&reports)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok((runs, summary))
}

pub fn popularity_report(ds: &SequenceDataset, split: Split, ks: &[usize], threads: usize) -> Result<EvalReport> {
    // the popularity scorer ignores the padded context, any width works
    evaluate_sharded(&PopularityScorer::new(ds), ds, split, ks, 1, 512, threads)
}

/// Plain-text table of a report.
pub fn format_report(r: &EvalReport) -> String {
    let mut s = format!("split {}  users {}\n", r.split.name(), r.n_users);
    s.push_str("metric       mean\n");
    for (i, k) in r.ks.iter().enumerate() {
        s.push_str(&format!("recall@{k:<4} {:.6}\n", r.recall[i]));
    }
    for (i, k) in r.ks.iter().enumerate() {
        s.push_str(&format!("ndcg@{k:<6} {:.6}\n", r.ndcg[i]));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    Full,
    NoUaf,
    NoGfm,
    NoLfm,
    NoAux,
    NoBal,
    MlpUaf,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Full, Variant::NoUaf, Variant::NoGfm, Variant::NoLfm, Variant::NoAux, Variant::NoBal, Variant::MlpUaf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoUaf => "no-uaf",
            Variant::NoGfm => "no-gfm",
            Variant::NoLfm => "no-lfm",
            Variant::NoAux => "no-aux",
            Variant::NoBal => "no-bal",
            Variant::MlpUaf => "mlp-uaf",
        }
    }

    /// The configuration of this variant; each changes exactly one switch.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoUaf => c.model.use_uaf = false,
            Variant::NoGfm => c.model.use_gfm = false,
            Variant::NoLfm => c.model.use_lfm = false,
            Variant::NoAux => c.train.alpha = 0.0,
            Variant::NoBal => c.train.beta = 0.0,
            Variant::MlpUaf => c.model.uaf_as_mlp = true,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Variant::ALL.iter().find(|v| v.name() == s.trim()) {
            Some(v) => Ok(*v),
            None => {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                bail!(Config, "unknown variant {s:?}; expected one of {}", names.join(", "))
            }
        }
    }
}

/// Mean over seeds of one per-user metric, for paired tests between
/// configurations evaluated on the same users.
fn per_user_mean(reports: &[EvalReport], metric: Metric, k: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; reports[0].n_users];
    for r in reports {
        if r.users != reports[0].users {
            bail!(Data, "reports cover different users");
        }
        for (a, v) in acc.iter_mut().zip(r.per_user(metric, k)?) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= reports.len() as f64);
    Ok(acc)
}

/// One row of a comparison table: a metric of one configuration against
/// the reference configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    /// `mean - reference mean`.
    pub delta: f64,
    /// One-tailed paired t-test that the reference beats this row, over
    /// seed-averaged per-user values; absent for the reference itself.
    pub p_value: Option<f64>,
}

fn comparison_rows(label: &str, reports: &[EvalReport], reference: Option<&[EvalReport]>) -> Result<Vec<ComparisonRow>> {
    let summary = SeedSummary::new(reports)?;
    let ref_summary = reference.map(SeedSummary::new).transpose()?;
    let mut rows = Vec::new();
    for metric in [Metric::Recall, Metric::Ndcg] {
        for &k in &summary.ks {
            let (mean, std) = summary.get(metric, k).expect("k from the summary");
            let (delta, p_value) = match (reference, &ref_summary) {
                (Some(r), Some(rs)) => {
                    let base = rs.get(metric, k).map(|x| x.0).unwrap_or(f64::NAN);
                    let t = paired_t_test(&per_user_mean(r, metric, k)?, &per_user_mean(reports, metric, k)?);
                    (mean - base, t.map(|t| t.p_value))
                }
                _ => (0.0, None),
            };
            let name = match metric {
                Metric::Recall => "recall",
                Metric::Ndcg => "ndcg",
            };
            rows.push(ComparisonRow { label: label.to_string(), metric: name.into(), k, mean, std, delta, p_value });
        }
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn format_rows(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{:<12} {:<10} {:>9} {:>9} {:>10} {:>8}\n", "config", "metric", "mean", "std", "delta", "p");
    for r in rows {
        let p = r.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<12} {:<10} {:>9.5} {:>9.5} {:>+10.5} {:>8}\n",
            r.label,
            format!("{}@{}", r.metric, r.k),
            r.mean,
            r.std,
            r.delta,
            p
        ));
    }
    s
}

/// Test reports of one configuration over every seed.
pub fn run_seeds(cfg: &RunConfig, ds: &SequenceDataset, out: Option<&Path>) -> Result<Vec<SeedRun>> {
    cfg.seeds()
        .into_iter()
        .map(|seed| {
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("seed-{seed}")));
            train_seed(cfg, ds, seed, dir.as_deref())
        })
        .collect()
}

/// Trains every variant over the shared seeds; the first variant is the
/// reference of the deltas (normally `full`).
pub fn ablate(cfg: &RunConfig, ds: &SequenceDataset, variants: &[Variant], out: &Path) -> Result<Vec<ComparisonRow>> {
    if variants.is_empty() {
        bail!(Config, "no variants to run");
    }
    let configs: Vec<RunConfig> = variants.iter().map(|v| v.apply(cfg)).collect();
    for (v, c) in variants.iter().zip(&configs) {
        c.validate().map_err(|e| Error::Config(format!("variant {v}: {e}")))?;
    }
    cfg.echo(out)?;
    let mut all: Vec<Vec<EvalReport>> = Vec::new();
    for (v, c) in variants.iter().zip(&configs) {
        let runs = run_seeds(c, ds, Some(&out.join(v.name())))?;
        all.push(runs.into_iter().map(|r| r.test).collect());
    }
    let mut rows = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        let reference = if i == 0 { None } else { Some(all[0].as_slice()) };
        rows.extend(comparison_rows(v.name(), &all[i], reference)?);
    }
    write_rows(&out.join("ablation.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Bands,
    Alpha,
    Beta,
    Kernel,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "K" | "k" | "bands" => SweepParam::Bands,
            "alpha" => SweepParam::Alpha,
            "beta" => SweepParam::Beta,
            "c" | "kernel" => SweepParam::Kernel,
            _ => bail!(Config, "unknown sweep parameter {s:?}; expected K, alpha, beta or c"),
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Bands => "K",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Kernel => "c",
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        let integer = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} must be a non-negative integer, got {value}", self.name())))
            }
        };
        match self {
            SweepParam::Bands => c.model.bands = integer()?,
            SweepParam::Kernel => c.model.kernel = integer()?,
            SweepParam::Alpha => c.train.alpha = value,
            SweepParam::Beta => c.train.beta = value,
        }
        Ok(c)
    }
}

/// One configuration per grid value, all checked before any training.
pub fn sweep_configs(cfg: &RunConfig, param: SweepParam, grid: &[f64]) -> Result<Vec<RunConfig>> {
    if grid.is_empty() {
        bail!(Config, "empty sweep grid");
    }
    let mut problems = Vec::new();
    let mut configs = Vec::new();
    for &v in grid {
        match param.apply(cfg, v).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => configs.push(c),
            Err(e) => problems.push(format!("{}={v}: {e}", param.name())),
        }
    }
    if !problems.is_empty() {
        bail!(Config, "rejected sweep values:\n  - {}", problems.join("\n  - "));
    }
    Ok(configs)
}

pub fn sweep(cfg: &RunConfig, ds: &SequenceDataset, param: SweepParam, grid: &[f64], out: &Path) -> Result<Vec<ComparisonRow>> {
    let configs = sweep_configs(cfg, param, grid)?;
    cfg.echo(out)?;
    let mut all = Vec::new();
    for (v, c) in grid.iter().zip(&configs) {
        let label = format!("{}={v}", param.name());
        let runs = run_seeds(c, ds, Some(&out.join(&label)))?;
        all.push((label, runs.into_iter().map(|r| r.test).collect::<Vec<_>>()));
    }
    let mut rows = Vec::new();
    for (i, (label, reports)) in all.iter().enumerate() {
        let reference = if i == 0 { None } else { Some(all[0].1.as_slice()) };
        rows.extend(comparison_rows(label, reports, reference)?);
    }
    write_rows(&out.join("sweep.csv"), &rows)?;
    Ok(rows)
}
