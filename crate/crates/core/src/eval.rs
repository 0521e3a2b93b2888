//! Full-ranking next-item evaluation.
//!
//! Every item except the padding id is a candidate, including items the
//! user has already interacted with. Ties are broken pessimistically: an
//! item scoring exactly as high as the target counts as ranked ahead of it.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, SequenceBatch, SequenceDataset, Split, PAD};
use crate::error::bail;
use crate::stats::{compensated_sum, paired_t_test, PairedTTest, Welford};
use crate::Result;

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// 1-based rank of `target` among items `1..scores.len()`. Column 0 is the
/// padding id and is ignored.
pub fn rank_target(scores: &[f64], target: usize) -> Result<usize> {
    if target == PAD {
        bail!(Contract, "the padding id cannot be ranked");
    }
    if target >= scores.len() {
        bail!(Index, "target {target} outside {} scored items", scores.len().saturating_sub(1));
    }
    let s = scores[target];
    if s.is_nan() {
        bail!(Numeric, "target score is NaN");
    }
    let ahead = scores[1..]
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j + 1 != target && v >= s)
        .count();
    Ok(1 + ahead)
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        bail!(Config, "cutoff K must be at least 1");
    }
    Ok(())
}

pub fn recall_at_k(rank: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(if rank >= 1 && rank <= k { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(if rank >= 1 && rank <= k { 1.0 / libm::log2(rank as f64 + 1.0) } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Recall,
    Ndcg,
}

impl Metric {
    pub fn at(self, rank: usize, k: usize) -> Result<f64> {
        match self {
            Metric::Recall => recall_at_k(rank, k),
            Metric::Ndcg => ndcg_at_k(rank, k),
        }
    }

    pub fn label(self, k: usize) -> String {
        match self {
            Metric::Recall => alloc::format!("R@{k}"),
            Metric::Ndcg => alloc::format!("N@{k}"),
        }
    }
}

/// Anything that scores all items for a batch of contexts. Output is
/// `(batch, num_items + 1)` row-major; column 0 is ignored.
pub trait Scorer {
    fn score(&mut self, batch: &SequenceBatch) -> Result<Vec<f64>>;
}

/// Scores every item by its interaction count in the training inputs.
#[derive(Clone, Debug)]
pub struct PopularityScorer {
    counts: Vec<f64>,
}

impl PopularityScorer {
    pub fn new(ds: &SequenceDataset) -> Self {
        Self { counts: ds.train_item_counts().into_iter().map(|c| c as f64).collect() }
    }
}

impl Scorer for PopularityScorer {
    fn score(&mut self, batch: &SequenceBatch) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.batch * self.counts.len());
        for _ in 0..batch.batch {
            out.extend_from_slice(&self.counts);
        }
        Ok(out)
    }
}

/// Per-cutoff means over users, with the per-user ranks behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n_users: usize,
    pub users: Vec<usize>,
    pub ranks: Vec<usize>,
    pub seed: Option<u64>,
    pub wall_clock_secs: Option<f64>,
}

impl EvalReport {
    /// Aggregates ranks in the given user order.
    pub fn from_ranks(split: Split, ks: &[usize], users: Vec<usize>, ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            bail!(Data, "no {} examples to evaluate", split.name());
        }
        if users.len() != ranks.len() {
            bail!(Shape, "{} users for {} ranks", users.len(), ranks.len());
        }
        let mut recall = Vec::with_capacity(ks.len());
        let mut ndcg = Vec::with_capacity(ks.len());
        for &k in ks {
            check_k(k)?;
            let n = ranks.len() as f64;
            recall.push(compensated_sum(ranks.iter().map(|&r| recall_at_k(r, k).unwrap_or(0.0))) / n);
            ndcg.push(compensated_sum(ranks.iter().map(|&r| ndcg_at_k(r, k).unwrap_or(0.0))) / n);
        }
        Ok(Self {
            split,
            ks: ks.to_vec(),
            recall,
            ndcg,
            n_users: ranks.len(),
            users,
            ranks,
            seed: None,
            wall_clock_secs: None,
        })
    }

    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(match metric {
            Metric::Recall => self.recall[i],
            Metric::Ndcg => self.ndcg[i],
        })
    }

    pub fn per_user(&self, metric: Metric, k: usize) -> Result<Vec<f64>> {
        self.ranks.iter().map(|&r| metric.at(r, k)).collect()
    }

    /// Whether both metrics are non-decreasing in the cutoff.
    pub fn is_monotone(&self) -> bool {
        let mut order: Vec<usize> = (0..self.ks.len()).collect();
        order.sort_by_key(|&i| self.ks[i]);
        order.windows(2).all(|w| self.recall[w[0]] <= self.recall[w[1]] && self.ndcg[w[0]] <= self.ndcg[w[1]])
    }
}

/// Ranks every example of `split` with `scorer`, in user order.
pub fn evaluate(
    scorer: &mut dyn Scorer,
    ds: &SequenceDataset,
    split: Split,
    ks: &[usize],
    n: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    let batches = make_batches(ds, n, batch_size, 0, split, false)?;
    let (users, ranks) = rank_batches(scorer, &batches)?;
    EvalReport::from_ranks(split, ks, users, ranks)
}

/// Ranks of the targets of each batch, concatenated in order.
pub fn rank_batches(scorer: &mut dyn Scorer, batches: &[SequenceBatch]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut users = Vec::new();
    let mut ranks = Vec::new();
    for b in batches {
        let scores = scorer.score(b)?;
        if b.batch == 0 {
            continue;
        }
        let width = scores.len() / b.batch;
        if width * b.batch != scores.len() {
            bail!(Shape, "scorer returned {} values for {} rows", scores.len(), b.batch);
        }
        for (row, &target) in scores.chunks(width).zip(&b.targets) {
            ranks.push(rank_target(row, target)?);
        }
        users.extend_from_slice(&b.users);
    }
    Ok((users, ranks))
}

/// Mean and sample standard deviation of per-seed means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub ks: Vec<usize>,
    pub seeds: Vec<Option<u64>>,
    pub recall_mean: Vec<f64>,
    pub recall_std: Vec<f64>,
    pub ndcg_mean: Vec<f64>,
    pub ndcg_std: Vec<f64>,
}

impl SeedSummary {
    pub fn new(reports: &[EvalReport]) -> Result<Self> {
        let Some(first) = reports.first() else {
            bail!(Data, "no reports to summarize");
        };
        if reports.iter().any(|r| r.ks != first.ks) {
            bail!(Contract, "reports use different cutoffs");
        }
        let column = |f: &dyn Fn(&EvalReport) -> f64| {
            let mut w = Welford::default();
            reports.iter().for_each(|r| w.push(f(r)));
            (w.mean(), w.sample_std())
        };
        let mut s = Self {
            ks: first.ks.clone(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            recall_mean: Vec::new(),
            recall_std: Vec::new(),
            ndcg_mean: Vec::new(),
            ndcg_std: Vec::new(),
        };
        for i in 0..first.ks.len() {
            let (m, sd) = column(&|r| r.recall[i]);
            s.recall_mean.push(m);
            s.recall_std.push(sd);
            let (m, sd) = column(&|r| r.ndcg[i]);
            s.ndcg_mean.push(m);
            s.ndcg_std.push(sd);
        }
        Ok(s)
    }

    pub fn get(&self, metric: Metric, k: usize) -> Option<(f64, f64)> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(match metric {
            Metric::Recall => (self.recall_mean[i], self.recall_std[i]),
            Metric::Ndcg => (self.ndcg_mean[i], self.ndcg_std[i]),
        })
    }
}

/// One-tailed paired t-test that `a` beats `b` on a per-user metric. Both
/// reports must cover the same users in the same order.
pub fn compare(a: &EvalReport, b: &EvalReport, metric: Metric, k: usize) -> Result<Option<PairedTTest>> {
    if a.users != b.users {
        bail!(Contract, "paired comparison needs reports over the same users");
    }
    Ok(paired_t_test(&a.per_user(metric, k)?, &b.per_user(metric, k)?))
}
