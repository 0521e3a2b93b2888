//! Evaluation sharded over threads. Batches are split into contiguous
//! runs, one per worker, and the per-user ranks are concatenated in the
//! original order, so the report is identical to a sequential pass.

use std::num::NonZeroUsize;
use std::thread;

use muffin_core::data::{make_batches, SequenceBatch, SequenceDataset, Split};
use muffin_core::eval::{rank_batches, EvalReport, Scorer};
use muffin_core::model::ModelParams;
use muffin_core::training::ModelScorer;

use crate::error::Result;

/// `requested`, or every available core when it is 0.
pub fn resolve_threads(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1)
    }
}

pub fn rank_sharded<S>(scorer: &S, batches: &[SequenceBatch], threads: usize) -> Result<(Vec<usize>, Vec<usize>)>
where
    S: Scorer + Clone + Send,
{
    let threads = threads.clamp(1, batches.len().max(1));
    if threads == 1 {
        return Ok(rank_batches(&mut scorer.clone(), batches)?);
    }
    let per = batches.len().div_ceil(threads);
    let parts: Vec<muffin_core::Result<(Vec<usize>, Vec<usize>)>> = thread::scope(|s| {
        let handles: Vec<_> = batches
            .chunks(per)
            .map(|chunk| {
                let mut local = scorer.clone();
                s.spawn(move || rank_batches(&mut local, chunk))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut users = Vec::new();
    let mut ranks = Vec::new();
    for p in parts {
        let (u, r) = p?;
        users.extend(u);
        ranks.extend(r);
    }
    Ok((users, ranks))
}

pub fn evaluate_sharded<S>(
    scorer: &S,
    ds: &SequenceDataset,
    split: Split,
    ks: &[usize],
    n: usize,
    batch_size: usize,
    threads: usize,
) -> Result<EvalReport>
where
    S: Scorer + Clone + Send,
{
    let batches = make_batches(ds, n, batch_size, 0, split, false)?;
    let (users, ranks) = rank_sharded(scorer, &batches, threads)?;
    Ok(EvalReport::from_ranks(split, ks, users, ranks)?)
}

pub fn evaluate_model(
    params: &ModelParams,
    ds: &SequenceDataset,
    split: Split,
    ks: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<EvalReport> {
    evaluate_sharded(&ModelScorer { params }, ds, split, ks, params.config.n, batch_size, threads)
}
