use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Branch, ModelParams};
use crate::autodiff::{BatchStats, Tape, Var};
use crate::data::{SequenceBatch, PAD};
use crate::error::bail;
use crate::rng::SeededRng;
use crate::spectral::BandLayout;
use crate::Result;

/// Gate MLP weights on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

/// Feed-forward block weights and the norm after it.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// User-adaptive mask `sigmoid(BN(conv(amp)))` over a `(batch, m, d)`
/// amplitude spectrum, convolving along the frequency axis. With `as_mlp`
/// the convolution is a linear map over the feature axis.
pub fn uaf(
    tape: &mut Tape,
    amp: Var,
    weight: Var,
    bn: (Var, Var),
    running: (&[f64], &[f64]),
    as_mlp: bool,
    train: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let z = if as_mlp { tape.matmul(amp, weight)? } else { tape.conv1d(amp, weight)? };
    let (z, stats) = tape.batch_norm(z, bn.0, bn.1, train, running)?;
    Ok((tape.sigmoid(z), stats))
}

/// `LayerNorm(H + Dropout(irfft(rfft(H) * W)))`. `filter` is complex,
/// `(batch, m, d, 2)` or `(m, d, 2)`.
pub fn gfm_layer(
    tape: &mut Tape,
    h: Var,
    filter: Var,
    norm: (Var, Var),
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
) -> Result<Var> {
    gfm(tape, h, filter, norm, dropout, train, rng, false)
}

/// [`gfm_layer`] evaluated at the last position only, `(batch, d)`.
pub fn gfm_layer_last(
    tape: &mut Tape,
    h: Var,
    filter: Var,
    norm: (Var, Var),
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
) -> Result<Var> {
    gfm(tape, h, filter, norm, dropout, train, rng, true)
}

#[allow(clippy::too_many_arguments)]
fn gfm(
    tape: &mut Tape,
    h: Var,
    filter: Var,
    norm: (Var, Var),
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
    last: bool,
) -> Result<Var> {
    let f = tape.rfft(h)?;
    let y = tape.complex_mul(f, filter)?;
    residual_norm(tape, h, y, norm, dropout, train, rng, last)
}

/// `LayerNorm(H + Dropout(irfft(y)))`, over all positions or the last.
#[allow(clippy::too_many_arguments)]
fn residual_norm(
    tape: &mut Tape,
    h: Var,
    y: Var,
    norm: (Var, Var),
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
    last: bool,
) -> Result<Var> {
    let n = tape.shape(h)[1];
    let (h, x) = if last {
        (last_position(tape, h)?, tape.irfft_at(y, n, n - 1)?)
    } else {
        (h, tape.irfft(y, n)?)
    };
    let x = tape.dropout(x, dropout, train, rng)?;
    let s = tape.add(h, x)?;
    tape.layer_norm(s, norm.0, norm.1)
}

/// Band outputs `o_t = LayerNorm(H + Dropout(irfft(pad(slice(F * W, t)))))`
/// for every band of `layout`, where `f` is the spectrum of `h`. With
/// `last` only the final position of each is computed.
#[allow(clippy::too_many_arguments)]
pub fn lfm_bands(
    tape: &mut Tape,
    h: Var,
    f: Var,
    filter: Var,
    norm: (Var, Var),
    layout: &BandLayout,
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
    last: bool,
) -> Result<Vec<Var>> {
    let m = tape.shape(f)[1];
    if layout.m != m {
        bail!(Shape, "band layout covers {} bins, spectrum has {m}", layout.m);
    }
    let y = tape.complex_mul(f, filter)?;
    let mut outs = Vec::with_capacity(layout.bands());
    for t in 0..layout.bands() {
        let r = layout.range(t);
        let band = tape.slice(y, 1, r.start, r.end)?;
        let padded = tape.pad(band, 1, r.start, m - r.end)?;
        outs.push(residual_norm(tape, h, padded, norm, dropout, train, rng, last)?);
    }
    Ok(outs)
}

/// Band probabilities `(batch, K)` from the amplitude of spectrum `f`,
/// mean-pooled over features, through a three-layer GeLU MLP.
pub fn gate_probs(tape: &mut Tape, f: Var, g: &GateVars) -> Result<Var> {
    let amp = tape.complex_abs(f)?;
    let pooled = tape.mean_last(amp)?;
    let mut z = pooled;
    for (w, b, act) in [(g.w1, g.b1, true), (g.w2, g.b2, true), (g.w3, g.b3, false)] {
        z = tape.matmul(z, w)?;
        z = tape.add(z, b)?;
        if act {
            z = tape.gelu(z);
        }
    }
    tape.softmax(z)
}

/// `sum_t p[:, t] * o_t`.
pub fn mix_bands(tape: &mut Tape, outs: &[Var], p: Var) -> Result<Var> {
    let batch = tape.shape(p)[0];
    if tape.shape(p) != [batch, outs.len()] {
        bail!(Shape, "gate {:?} does not match {} bands", tape.shape(p), outs.len());
    }
    let mut acc: Option<Var> = None;
    for (t, &o) in outs.iter().enumerate() {
        let pt = tape.slice(p, 1, t, t + 1)?;
        let pt = tape.reshape(pt, &[batch])?;
        let w = tape.mul_prefix(o, pt)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, w)?,
            None => w,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => bail!(Shape, "mixing zero bands"),
    }
}

/// Local filtering layer: band outputs mixed by the gate. Returns the
/// output and the gate probabilities.
#[allow(clippy::too_many_arguments)]
pub fn lfm_layer(
    tape: &mut Tape,
    h: Var,
    filter: Var,
    norm: (Var, Var),
    gate: &GateVars,
    layout: &BandLayout,
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
) -> Result<(Var, Var)> {
    lfm(tape, h, filter, norm, gate, layout, dropout, train, rng, false)
}

/// [`lfm_layer`] evaluated at the last position only.
#[allow(clippy::too_many_arguments)]
pub fn lfm_layer_last(
    tape: &mut Tape,
    h: Var,
    filter: Var,
    norm: (Var, Var),
    gate: &GateVars,
    layout: &BandLayout,
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
) -> Result<(Var, Var)> {
    lfm(tape, h, filter, norm, gate, layout, dropout, train, rng, true)
}

#[allow(clippy::too_many_arguments)]
fn lfm(
    tape: &mut Tape,
    h: Var,
    filter: Var,
    norm: (Var, Var),
    gate: &GateVars,
    layout: &BandLayout,
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
    last: bool,
) -> Result<(Var, Var)> {
    let f = tape.rfft(h)?;
    let outs = lfm_bands(tape, h, f, filter, norm, layout, dropout, train, rng, last)?;
    let p = gate_probs(tape, f, gate)?;
    Ok((mix_bands(tape, &outs, p)?, p))
}

/// `LayerNorm(O + Dropout(GeLU(O W1 + b1) W2 + b2))`.
pub fn ffn_block(
    tape: &mut Tape,
    o: Var,
    p: &FfnVars,
    dropout: f64,
    train: bool,
    rng: &mut SeededRng,
) -> Result<Var> {
    let z = tape.matmul(o, p.w1)?;
    let z = tape.add(z, p.b1)?;
    let z = tape.gelu(z);
    let z = tape.matmul(z, p.w2)?;
    let z = tape.add(z, p.b2)?;
    let z = tape.dropout(z, dropout, train, rng)?;
    let s = tape.add(o, z)?;
    tape.layer_norm(s, p.gamma, p.beta)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// Layer input `H^l`, `(batch, n, d)`.
    pub input: Var,
    /// User-adaptive mask applied at this layer, `(batch, m, d)`.
    pub mask: Var,
    /// Effective filter `mask * W`, `(batch, m, d, 2)`.
    pub filter: Var,
    /// Filtering module output before the FFN. The final layer only
    /// computes the last position, `(batch, d)`.
    pub filtered: Var,
    /// Gate probabilities `(batch, K)` of the local branch.
    pub gate: Option<Var>,
    /// Layer output `H^{l+1}`; `(batch, d)` at the final layer.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct BranchTrace {
    pub branch: Branch,
    pub layers: Vec<LayerTrace>,
    /// Last position of the final layer, `(batch, d)`.
    pub last: Var,
    /// Auxiliary logits `E * last`, `(batch, items + 1)`.
    pub logits: Var,
}

/// Everything one forward pass recorded.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One leaf per parameter tensor, in parameter order.
    pub params: Vec<Var>,
    pub h0: Var,
    pub x0: Var,
    pub branches: Vec<BranchTrace>,
    /// Fused representation of the last position, `(batch, d)`.
    pub fused: Var,
    /// Logits over all items, `(batch, items + 1)`; column 0 is padding.
    pub scores: Var,
    /// Training-mode batch-norm statistics keyed by the norm's prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
}

impl Forward {
    pub fn branch(&self, b: Branch) -> Option<&BranchTrace> {
        self.branches.iter().find(|t| t.branch == b)
    }

    /// Gate probabilities of every local layer.
    pub fn gates(&self) -> Vec<Var> {
        self.branch(Branch::Local).map(|t| t.layers.iter().filter_map(|l| l.gate).collect()).unwrap_or_default()
    }
}

struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        match self.params.position(name) {
            Some(i) => Ok(self.vars[i]),
            None => bail!(Index, "missing parameter {name}"),
        }
    }

    fn pair(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((self.get(&format!("{prefix}.gamma"))?, self.get(&format!("{prefix}.beta"))?))
    }

    fn values(&self, name: &str) -> Result<&[f64]> {
        match self.params.get(name) {
            Some(t) => Ok(t.values()),
            None => bail!(Index, "missing buffer {name}"),
        }
    }
}

/// Runs the whole model on a batch. In training mode dropout is active and
/// the UAF batch norms use batch statistics (returned in
/// [`Forward::bn_stats`]); otherwise their running statistics.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &SequenceBatch,
    train: bool,
    rng: &mut SeededRng,
) -> Result<Forward> {
    let cfg = params.config;
    let (bsz, n, d, m) = (batch.batch, cfg.n, cfg.d, cfg.m());
    if batch.n != n {
        bail!(Shape, "batch padded to {} but the model expects {n}", batch.n);
    }
    if bsz == 0 {
        bail!(Data, "empty batch");
    }
    for b in 0..bsz {
        if batch.row(b)[n - 1] == PAD {
            bail!(Data, "user {} has an all-padding sequence", batch.users.get(b).copied().unwrap_or(b));
        }
    }
    let vars = params.tensors().iter().map(|t| tape.leaf(t)).collect();
    let p = Bound { params, vars };
    let emb = p.get("item_embedding")?;
    let h0 = tape.embedding(emb, &batch.ids, &[bsz, n])?;
    let x0 = tape.rfft(h0)?;
    let amp0 = tape.complex_abs(x0)?;
    let layout = if cfg.use_lfm { Some(BandLayout::new(m, cfg.bands)?) } else { None };
    let ones = if cfg.use_uaf { None } else { Some(tape.constant(&[bsz, m, d], vec![1.0; bsz * m * d])?) };

    let mut bn_stats = Vec::new();
    let mut branches = Vec::new();
    for br in cfg.branches() {
        let b = br.name();
        let mut shared_mask = None;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut h = h0;
        for l in 0..cfg.layers {
            let mask = match (ones, shared_mask) {
                (Some(o), _) => o,
                (None, Some(s)) => s,
                (None, None) => {
                    let prefix = cfg.uaf_prefix(br, l);
                    let weight =
                        p.get(&format!("{prefix}.{}", if cfg.uaf_as_mlp { "linear" } else { "kernel" }))?;
                    let running = (
                        p.values(&format!("{prefix}.bn.running_mean"))?,
                        p.values(&format!("{prefix}.bn.running_var"))?,
                    );
                    let bn = p.pair(&format!("{prefix}.bn"))?;
                    let (mask, stats) = uaf(tape, amp0, weight, bn, running, cfg.uaf_as_mlp, train)?;
                    if let Some(s) = stats {
                        bn_stats.push((format!("{prefix}.bn"), s));
                    }
                    if !cfg.uaf_per_layer {
                        shared_mask = Some(mask);
                    }
                    mask
                }
            };
            let mc = tape.real_to_complex(mask);
            let w = p.get(&format!("{b}.{l}.filter"))?;
            let filter = tape.complex_mul(mc, w)?;
            let norm = p.pair(&format!("{b}.{l}.norm"))?;
            // the head reads the last position only, and everything after
            // the final filter is position-wise
            let last = l + 1 == cfg.layers;
            let (filtered, gate) = match br {
                Branch::Global => (gfm(tape, h, filter, norm, cfg.dropout, train, rng, last)?, None),
                Branch::Local => {
                    let g = GateVars {
                        w1: p.get(&format!("{b}.{l}.gate.w1"))?,
                        b1: p.get(&format!("{b}.{l}.gate.b1"))?,
                        w2: p.get(&format!("{b}.{l}.gate.w2"))?,
                        b2: p.get(&format!("{b}.{l}.gate.b2"))?,
                        w3: p.get(&format!("{b}.{l}.gate.w3"))?,
                        b3: p.get(&format!("{b}.{l}.gate.b3"))?,
                    };
                    let layout = layout.as_ref().expect("layout exists when the local branch is on");
                    let (o, pr) = lfm(tape, h, filter, norm, &g, layout, cfg.dropout, train, rng, last)?;
                    (o, Some(pr))
                }
            };
            let (gamma, beta) = p.pair(&format!("{b}.{l}.ffn_norm"))?;
            let ffn = FfnVars {
                w1: p.get(&format!("{b}.{l}.ffn.w1"))?,
                b1: p.get(&format!("{b}.{l}.ffn.b1"))?,
                w2: p.get(&format!("{b}.{l}.ffn.w2"))?,
                b2: p.get(&format!("{b}.{l}.ffn.b2"))?,
                gamma,
                beta,
            };
            let out = ffn_block(tape, filtered, &ffn, cfg.dropout, train, rng)?;
            layers.push(LayerTrace { input: h, mask, filter, filtered, gate, output: out });
            h = out;
        }
        let last = h;
        let logits = tape.matmul_t(last, emb)?;
        branches.push(BranchTrace { branch: br, layers, last, logits });
    }

    let lasts: Vec<Var> = branches.iter().map(|t| t.last).collect();
    let cat = if lasts.len() == 1 { lasts[0] } else { tape.concat(&lasts, 1)? };
    let proj = tape.matmul(cat, p.get("head.proj")?)?;
    let h0_last = last_position(tape, h0)?;
    let s = tape.add(h0_last, proj)?;
    let (gamma, beta) = p.pair("head.norm")?;
    let fused = tape.layer_norm(s, gamma, beta)?;
    let fused = tape.dropout(fused, cfg.dropout, train, rng)?;
    let scores = tape.matmul_t(fused, emb)?;
    Ok(Forward { params: p.vars, h0, x0, branches, fused, scores, bn_stats })
}

/// `(batch, n, d)` to its last position `(batch, d)`.
fn last_position(tape: &mut Tape, h: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    let x = tape.slice(h, 1, s[1] - 1, s[1])?;
    tape.reshape(x, &[s[0], s[2]])
}
