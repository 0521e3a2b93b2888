//! Read-only views of a trained model for analysis dumps.

use alloc::vec;
use alloc::vec::Vec;

use super::{forward, Branch, ModelParams};
use crate::autodiff::Tape;
use crate::data::SequenceBatch;
use crate::error::bail;
use crate::rng::SeededRng;
use crate::Result;

/// Mean gate probability per band, one row per local layer, over every row
/// of `batches` in eval mode. Empty without the local branch.
pub fn mean_gates(params: &ModelParams, batches: &[SequenceBatch]) -> Result<Vec<Vec<f64>>> {
    if !params.config.use_lfm {
        return Ok(Vec::new());
    }
    let k = params.config.bands;
    let mut sums = vec![vec![0.0; k]; params.config.layers];
    let mut rows = 0usize;
    let mut rng = SeededRng::new(0);
    for b in batches {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, params, b, false, &mut rng)?;
        for (s, g) in sums.iter_mut().zip(fwd.gates()) {
            for row in tape.value(g).chunks(k) {
                s.iter_mut().zip(row).for_each(|(a, p)| *a += p);
            }
        }
        rows += b.batch;
    }
    if rows == 0 {
        bail!(Data, "no rows to average gates over");
    }
    for s in &mut sums {
        s.iter_mut().for_each(|v| *v /= rows as f64);
    }
    Ok(sums)
}

/// Effective filter amplitudes of one branch at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterAmplitudes {
    pub branch: Branch,
    /// Row-major `(batch, m)`: mean over features of `|mask * W|`.
    pub values: Vec<f64>,
    pub m: usize,
}

/// Per-user, per-bin amplitudes of the effective filters at `layer`, in
/// eval mode.
pub fn filter_amplitudes(params: &ModelParams, batch: &SequenceBatch, layer: usize) -> Result<Vec<FilterAmplitudes>> {
    if layer >= params.config.layers {
        bail!(Index, "layer {layer} out of range for {} layers", params.config.layers);
    }
    let mut tape = Tape::new();
    let mut rng = SeededRng::new(0);
    let fwd = forward(&mut tape, params, batch, false, &mut rng)?;
    let (m, d) = (params.config.m(), params.config.d);
    let mut out = Vec::new();
    for br in &fwd.branches {
        let w = tape.value(br.layers[layer].filter);
        let values = w
            .chunks_exact(2 * d)
            .map(|bin| bin.chunks_exact(2).map(|c| libm::hypot(c[0], c[1])).sum::<f64>() / d as f64)
            .collect();
        out.push(FilterAmplitudes { branch: br.branch, values, m });
    }
    Ok(out)
}
