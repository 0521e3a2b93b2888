//! Losses, Adam, early stopping and the epoch loop.

use alloc::vec;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{make_batches, SequenceBatch, SequenceDataset, Split};
use crate::error::bail;
use crate::eval::{evaluate, EvalReport, Scorer, DEFAULT_KS};
use crate::model::{forward, Forward, ModelConfig, ModelParams};
use crate::rng::SeededRng;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the auxiliary per-branch losses.
    pub alpha: f64,
    /// Weight of the gate load-balancing loss.
    pub beta: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; none when absent.
    pub grad_clip: Option<f64>,
    /// Train on every prefix of the training input instead of its last
    /// position only.
    pub all_positions: bool,
    pub eval_batch_size: usize,
    /// Cutoff of the validation NDCG used for early stopping.
    pub valid_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 256,
            alpha: 0.1,
            beta: 0.2,
            max_epochs: 200,
            patience: 15,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            all_positions: false,
            eval_batch_size: 512,
            valid_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        use alloc::format;
        let mut out = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            out.push(String::from("batch sizes must be positive"));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            out.push(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta));
        }
        if self.patience == 0 {
            out.push(String::from("patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            out.push(String::from("max_epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            out.push(String::from("adam moments must lie in [0, 1) and eps be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                out.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.valid_k == 0 {
            out.push(String::from("valid_k must be at least 1"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if !p.is_empty() {
            bail!(Config, "invalid training config: {}", p.join("; "));
        }
        Ok(())
    }
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub aux: Option<Var>,
    pub bal: Option<Var>,
}

/// Batch-mean cross-entropy of the fused scores; the padding column is
/// excluded from the softmax.
pub fn rec_loss(tape: &mut Tape, scores: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(scores, targets, true)
}

/// Sum over the surviving branches of their head's cross-entropy.
pub fn aux_loss(tape: &mut Tape, fwd: &Forward, targets: &[usize]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for b in &fwd.branches {
        let ce = tape.cross_entropy(b.logits, targets, true)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => bail!(Contract, "forward has no branches"),
    }
}

/// `(1/K) sum_t (p_t - 1/K)^2`, averaged over rows and layers.
pub fn bal_loss(tape: &mut Tape, gates: &[Var]) -> Result<Var> {
    if gates.is_empty() {
        bail!(Contract, "load balancing needs at least one gate");
    }
    let mut acc: Option<Var> = None;
    for &p in gates {
        let k = *tape.shape(p).last().unwrap_or(&1);
        let c = tape.add_scalar(p, -1.0 / k as f64);
        let sq = tape.mul(c, c)?;
        let m = tape.mean(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    let sum = acc.expect("gates is non-empty");
    Ok(tape.scale(sum, 1.0 / gates.len() as f64))
}

/// `rec + alpha * aux + beta * bal`. A zero weight leaves its term out of
/// the graph, so the total is then bit-identical to the remaining terms.
pub fn total_loss(tape: &mut Tape, fwd: &Forward, targets: &[usize], alpha: f64, beta: f64) -> Result<LossVars> {
    let rec = rec_loss(tape, fwd.scores, targets)?;
    let aux = Some(aux_loss(tape, fwd, targets)?);
    let gates = fwd.gates();
    let bal = if gates.is_empty() { None } else { Some(bal_loss(tape, &gates)?) };
    let mut total = rec;
    if let (Some(a), true) = (aux, alpha != 0.0) {
        let w = tape.scale(a, alpha);
        total = tape.add(total, w)?;
    }
    if let (Some(b), true) = (bal, beta != 0.0) {
        let w = tape.scale(b, beta);
        total = tape.add(total, w)?;
    }
    Ok(LossVars { total, rec, aux, bal })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { lr: cfg.lr, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients of every trainable tensor and
    /// clears them.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        if self.m.len() != params.len() {
            bail!(Shape, "optimizer state covers {} tensors, model has {}", self.m.len(), params.len());
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *x -= self.lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Early stopping on a metric that should increase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: 0, bad_epochs: 0, epoch: 0 }
    }

    /// Records one epoch's metric. Only strict improvements reset the
    /// counter; `patience` epochs in a row without one stop training.
    pub fn observe(&mut self, metric: f64) -> Verdict {
        self.epoch += 1;
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = self.epoch;
            self.bad_epochs = 0;
            Verdict::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Wait
            }
        }
    }
}

/// Loss components of one step or an epoch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub rec: f64,
    pub aux: f64,
    pub bal: f64,
    pub total: f64,
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: LossValues,
    /// Per layer, gate probabilities summed over the batch rows.
    pub gate_sums: Vec<Vec<f64>>,
}

fn flat_norm(params: &ModelParams) -> f64 {
    let s: f64 = params.tensors().iter().filter_map(|t| t.grad()).flat_map(|g| g.iter().map(|x| x * x)).sum();
    libm::sqrt(s)
}

/// Loss values and parameter gradients on one batch, without updating
/// anything. Gradients are accumulated into the parameter tensors.
pub fn compute_gradients(
    params: &mut ModelParams,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, params, batch, true, rng)?;
    let loss = total_loss(&mut tape, &fwd, &batch.targets, cfg.alpha, cfg.beta)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let losses = LossValues {
        rec: tape.scalar(loss.rec),
        aux: value(loss.aux),
        bal: value(loss.bal),
        total: tape.scalar(loss.total),
    };
    if !losses.total.is_finite() {
        bail!(Numeric, "loss became {}", losses.total);
    }
    let gate_sums = fwd
        .gates()
        .iter()
        .map(|&g| {
            let k = tape.shape(g)[1];
            let mut s = vec![0.0; k];
            for row in tape.value(g).chunks(k) {
                s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            s
        })
        .collect();
    tape.backward(loss.total)?;
    for (t, &v) in params.tensors_mut().iter_mut().zip(&fwd.params) {
        if t.requires_grad() {
            t.accumulate_grad(&tape.grad(v)?)?;
        }
    }
    params.update_running_stats(&fwd.bn_stats)?;
    Ok(StepOutcome { losses, gate_sums })
}

/// One Adam step on one batch.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<StepOutcome> {
    let out = compute_gradients(params, batch, cfg, rng)?;
    if let Some(clip) = cfg.grad_clip {
        let norm = flat_norm(params);
        if norm > clip {
            let f = clip / norm;
            for t in params.tensors_mut() {
                if let Some(g) = t.grad().map(|g| g.iter().map(|x| x * (f - 1.0)).collect::<Vec<_>>()) {
                    t.accumulate_grad(&g)?;
                }
            }
        }
    }
    opt.step(params)?;
    Ok(out)
}

/// Eval-mode scorer over a fixed set of parameters.
#[derive(Clone, Copy, Debug)]
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
}

impl Scorer for ModelScorer<'_> {
    fn score(&mut self, batch: &SequenceBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(0);
        let fwd = forward(&mut tape, self.params, batch, false, &mut rng)?;
        Ok(tape.value(fwd.scores).to_vec())
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossValues,
    pub valid_ks: Vec<usize>,
    pub valid_recall: Vec<f64>,
    pub valid_ndcg: Vec<f64>,
    /// Validation NDCG at the stopping cutoff.
    pub valid_metric: f64,
    /// Mean gate probability per band over the epoch's training rows and
    /// all local layers; empty without the local branch.
    pub gate_mean: Vec<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Spread `max - min` of a probability vector.
pub fn gate_spread(p: &[f64]) -> f64 {
    let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
    if p.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Runs one epoch over the shuffled training batches and returns the
/// example-weighted mean losses and gate probabilities.
pub fn train_epoch(
    params: &mut ModelParams,
    opt: &mut Adam,
    ds: &SequenceDataset,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut SeededRng,
) -> Result<(LossValues, Vec<f64>)> {
    let shuffle_seed = SeededRng::fork(cfg.seed, 1 + epoch as u64).next_u64();
    let batches = make_batches(ds, params.config.n, cfg.batch_size, shuffle_seed, Split::Train, cfg.all_positions)?;
    let mut sums = LossValues::default();
    let mut gate = Vec::new();
    let mut rows = 0usize;
    let mut gate_rows = 0usize;
    for b in &batches {
        let out = train_step(params, opt, b, cfg, rng)?;
        let w = b.batch as f64;
        sums.rec += out.losses.rec * w;
        sums.aux += out.losses.aux * w;
        sums.bal += out.losses.bal * w;
        sums.total += out.losses.total * w;
        rows += b.batch;
        for layer in &out.gate_sums {
            if gate.is_empty() {
                gate = vec![0.0; layer.len()];
            }
            gate.iter_mut().zip(layer).for_each(|(a, s)| *a += s);
            gate_rows += b.batch;
        }
    }
    let n = rows.max(1) as f64;
    let mean = LossValues { rec: sums.rec / n, aux: sums.aux / n, bal: sums.bal / n, total: sums.total / n };
    gate.iter_mut().for_each(|g| *g /= gate_rows.max(1) as f64);
    Ok((mean, gate))
}

/// Full training run with early stopping on validation NDCG. `on_epoch`
/// sees every history record as it is produced.
pub fn train(
    ds: &SequenceDataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let batch_size = cfg.eval_batch_size;
    train_with(ds, model, cfg, &mut |p, ks| validate(p, ds, ks, batch_size), on_epoch)
}

/// [`train`] with a caller-supplied validation pass, which must return the
/// validation report of the given parameters at the given cutoffs.
pub fn train_with(
    ds: &SequenceDataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    validator: &mut dyn FnMut(&ModelParams, &[usize]) -> Result<EvalReport>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if ds.examples(Split::Train).is_empty() {
        bail!(Data, "no user has a non-empty training context");
    }
    let mut params = ModelParams::init(model, ds.num_items(), cfg.seed)?;
    let mut opt = Adam::new(&params, cfg);
    let mut rng = SeededRng::fork(cfg.seed, 0xd0);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut ks: Vec<usize> = DEFAULT_KS.to_vec();
    if !ks.contains(&cfg.valid_k) {
        ks.push(cfg.valid_k);
        ks.sort_unstable();
    }
    for epoch in 1..=cfg.max_epochs {
        let (losses, gate_mean) = train_epoch(&mut params, &mut opt, ds, cfg, epoch, &mut rng)?;
        let report = validator(&params, &ks)?;
        let metric = report.get(crate::eval::Metric::Ndcg, cfg.valid_k).unwrap_or(0.0);
        let verdict = stopper.observe(metric);
        if verdict == Verdict::Improved {
            best = params.clone();
        }
        let rec = EpochRecord {
            epoch,
            losses,
            valid_ks: report.ks.clone(),
            valid_recall: report.recall.clone(),
            valid_ndcg: report.ndcg.clone(),
            valid_metric: metric,
            gate_mean,
            improved: verdict == Verdict::Improved,
        };
        on_epoch(&rec);
        history.push(rec);
        if verdict == Verdict::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best.unwrap_or(0.0),
        history,
        stopped_early,
    })
}

/// Validation report in eval mode.
pub fn validate(params: &ModelParams, ds: &SequenceDataset, ks: &[usize], batch_size: usize) -> Result<EvalReport> {
    evaluate(&mut ModelScorer { params }, ds, Split::Valid, ks, params.config.n, batch_size)
}
