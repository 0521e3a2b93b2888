use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::autodiff::{Tape, Var};
use crate::data::{SequenceBatch, PAD};
use crate::spectral::{irfft, rfft, zero_pad_band, slice_band, RealBatch};
use crate::training::total_loss;

fn small_config() -> ModelConfig {
    ModelConfig { d: 4, n: 8, layers: 1, bands: 2, kernel: 3, dropout: 0.0, ..ModelConfig::default() }
}

fn random_batch(rng: &mut SeededRng, batch: usize, n: usize, items: usize) -> SequenceBatch {
    let mut ids = Vec::with_capacity(batch * n);
    let mut lengths = Vec::new();
    for _ in 0..batch {
        let len = 1 + rng.below(n);
        lengths.push(len);
        ids.extend((0..n).map(|i| if i < n - len { PAD } else { 1 + rng.below(items) }));
    }
    SequenceBatch {
        ids,
        batch,
        n,
        lengths,
        targets: (0..batch).map(|_| 1 + rng.below(items)).collect(),
        users: (0..batch).collect(),
    }
}

fn random_leaf(tape: &mut Tape, rng: &mut SeededRng, shape: &[usize], scale: f64, offset: f64) -> Var {
    let numel = shape.iter().product();
    let t = Tensor::new(shape, (0..numel).map(|_| offset + scale * rng.normal()).collect()).unwrap().with_grad(true);
    tape.leaf(&t)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig { bands: 27, ..ModelConfig::default() };
    assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
    let bad = ModelConfig { kernel: 4, use_gfm: false, use_lfm: false, ..ModelConfig::default() };
    assert_eq!(bad.problems().len(), 2);
    // K is irrelevant without the local branch
    assert!(ModelConfig { bands: 99, use_lfm: false, ..ModelConfig::default() }.validate().is_ok());
}

#[test]
fn layout_round_trips_through_entries() {
    let cfg = ModelConfig { uaf_per_layer: true, ..small_config() };
    let p = ModelParams::init(&cfg, 6, 1).unwrap();
    let entries: Vec<(String, Tensor)> = p.entries().map(|(n, t)| (String::from(n), t.clone())).collect();
    let q = ModelParams::from_entries(cfg, 6, entries.clone()).unwrap();
    assert_eq!(p, q);
    assert!(p.get("uaf.local.0.kernel").is_some());
    assert!(!p.get("uaf.global.0.bn.running_var").unwrap().requires_grad());
    let mut wrong = entries;
    wrong.swap(0, 1);
    assert!(ModelParams::from_entries(cfg, 6, wrong).is_err());
}

#[test]
fn filters_start_near_identity() {
    let p = ModelParams::init(&ModelConfig::default(), 10, 3).unwrap();
    let w = p.get("global.0.filter").unwrap().values();
    let re_mean = w.iter().step_by(2).sum::<f64>() / (w.len() / 2) as f64;
    let im_mean = w.iter().skip(1).step_by(2).sum::<f64>() / (w.len() / 2) as f64;
    assert!((re_mean - 1.0).abs() < 0.01 && im_mean.abs() < 0.01);
}

#[test]
fn last_position_embeds_the_last_item() {
    let cfg = small_config();
    let p = ModelParams::init(&cfg, 6, 1).unwrap();
    let mut ids = vec![PAD; 8];
    ids[7] = 5;
    let batch = SequenceBatch { ids, batch: 1, n: 8, lengths: vec![1], targets: vec![2], users: vec![0] };
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, &p, &batch, false, &mut SeededRng::new(0)).unwrap();
    let h0 = tape.value(fwd.h0);
    let e = p.get("item_embedding").unwrap().values();
    assert_eq!(&h0[7 * 4..8 * 4], &e[5 * 4..6 * 4]);
    for i in 0..7 {
        assert_eq!(&h0[i * 4..(i + 1) * 4], &e[..4]);
    }
    assert_eq!(tape.shape(fwd.scores), [1, 7]);
}

#[test]
fn all_padding_rows_are_rejected() {
    let cfg = small_config();
    let p = ModelParams::init(&cfg, 6, 1).unwrap();
    let batch = SequenceBatch { ids: vec![PAD; 8], batch: 1, n: 8, lengths: vec![0], targets: vec![1], users: vec![0] };
    let err = forward(&mut Tape::new(), &p, &batch, false, &mut SeededRng::new(0)).unwrap_err();
    assert!(matches!(err, crate::Error::Data(_)));
}

#[test]
fn uaf_is_in_unit_interval_and_user_specific() {
    let mut rng = SeededRng::new(4);
    for as_mlp in [false, true] {
        let cfg = ModelConfig { uaf_as_mlp: as_mlp, ..small_config() };
        let p = ModelParams::init(&cfg, 20, 9).unwrap();
        for _ in 0..20 {
            let batch = loop {
                let b = random_batch(&mut rng, 2, 8, 20);
                if b.row(0) != b.row(1) {
                    break b;
                }
            };
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, &p, &batch, true, &mut SeededRng::new(0)).unwrap();
            let mask = tape.value(fwd.branches[0].layers[0].mask);
            assert!(mask.iter().all(|&v| v > 0.0 && v < 1.0));
            let half = mask.len() / 2;
            assert!(max_abs_diff(&mask[..half], &mask[half..]) > 0.0);
        }
    }
}

#[test]
fn gfm_identity_and_zero_filters() {
    let mut rng = SeededRng::new(5);
    let (b, n, d) = (2, 7, 3);
    let m = bin_count(n);
    let mut tape = Tape::new();
    let h = random_leaf(&mut tape, &mut rng, &[b, n, d], 1.0, 0.0);
    let gamma = tape.constant(&[d], vec![1.0; d]).unwrap();
    let beta = tape.constant(&[d], vec![0.0; d]).unwrap();
    let ones: Vec<f64> = (0..m * d).flat_map(|_| [1.0, 0.0]).collect();
    let identity = tape.constant(&[m, d, 2], ones).unwrap();
    let zero = tape.constant(&[m, d, 2], vec![0.0; m * d * 2]).unwrap();
    let out = gfm_layer(&mut tape, h, identity, (gamma, beta), 0.5, false, &mut rng).unwrap();
    let h2 = tape.scale(h, 2.0);
    let want = tape.layer_norm(h2, gamma, beta).unwrap();
    assert!(max_abs_diff(tape.value(out), tape.value(want)) < 1e-9);
    let out = gfm_layer(&mut tape, h, zero, (gamma, beta), 0.5, false, &mut rng).unwrap();
    let want = tape.layer_norm(h, gamma, beta).unwrap();
    assert_eq!(tape.value(out), tape.value(want));
}

fn gate_vars(tape: &mut Tape, rng: &mut SeededRng, m: usize, k: usize, zero_last: bool) -> GateVars {
    let h = 4 * k;
    let w3 = if zero_last {
        tape.constant(&[h, k], vec![0.0; h * k]).unwrap()
    } else {
        random_leaf(tape, rng, &[h, k], 0.5, 0.0)
    };
    GateVars {
        w1: random_leaf(tape, rng, &[m, h], 0.5, 0.0),
        b1: random_leaf(tape, rng, &[h], 0.1, 0.0),
        w2: random_leaf(tape, rng, &[h, h], 0.5, 0.0),
        b2: random_leaf(tape, rng, &[h], 0.1, 0.0),
        w3,
        b3: tape.constant(&[k], vec![0.0; k]).unwrap(),
    }
}

fn ffn_vars(tape: &mut Tape, rng: &mut SeededRng, d: usize) -> FfnVars {
    FfnVars {
        w1: random_leaf(tape, rng, &[d, 4 * d], 0.3, 0.0),
        b1: random_leaf(tape, rng, &[4 * d], 0.1, 0.0),
        w2: random_leaf(tape, rng, &[4 * d, d], 0.3, 0.0),
        b2: random_leaf(tape, rng, &[d], 0.1, 0.0),
        gamma: random_leaf(tape, rng, &[d], 0.1, 1.0),
        beta: random_leaf(tape, rng, &[d], 0.1, 0.0),
    }
}

#[test]
fn single_band_local_layer_equals_global_layer() {
    let mut rng = SeededRng::new(6);
    for trial in 0..20 {
        let (b, n, d) = (1 + rng.below(4), 2 + rng.below(20), 1 + rng.below(6));
        let m = bin_count(n);
        let mut tape = Tape::new();
        let h = random_leaf(&mut tape, &mut rng, &[b, n, d], 1.0, 0.0);
        let filter = random_leaf(&mut tape, &mut rng, &[b, m, d, 2], 0.5, 0.5);
        let norm = (random_leaf(&mut tape, &mut rng, &[d], 0.1, 1.0), random_leaf(&mut tape, &mut rng, &[d], 0.1, 0.0));
        let gate = gate_vars(&mut tape, &mut rng, m, 1, false);
        let ffn = ffn_vars(&mut tape, &mut rng, d);
        let layout = BandLayoutK1::new(m);
        let masks = SeededRng::new(100 + trial);
        let (mut r1, mut r2) = (masks.clone(), masks);
        let g = gfm_layer(&mut tape, h, filter, norm, 0.3, true, &mut r1).unwrap();
        let g = ffn_block(&mut tape, g, &ffn, 0.3, true, &mut r1).unwrap();
        let (l, p) = lfm_layer(&mut tape, h, filter, norm, &gate, &layout.0, 0.3, true, &mut r2).unwrap();
        let l = ffn_block(&mut tape, l, &ffn, 0.3, true, &mut r2).unwrap();
        assert!(tape.value(p).iter().all(|&x| x == 1.0));
        let diff = max_abs_diff(tape.value(g), tape.value(l));
        assert!(diff < 1e-6, "trial {trial}: {diff}");
    }
}

struct BandLayoutK1(crate::spectral::BandLayout);

impl BandLayoutK1 {
    fn new(m: usize) -> Self {
        Self(crate::spectral::BandLayout::new(m, 1).unwrap())
    }
}

#[test]
fn band_partition_reconstructs_the_filtered_spectrum() {
    let mut rng = SeededRng::new(7);
    for (n, k) in [(50, 1), (50, 4), (50, 6), (48, 5), (9, 3)] {
        let m = bin_count(n);
        let layout = crate::spectral::BandLayout::new(m, k).unwrap();
        let mut tape = Tape::new();
        let h = random_leaf(&mut tape, &mut rng, &[2, n, 3], 1.0, 0.0);
        let f = tape.rfft(h).unwrap();
        let w = random_leaf(&mut tape, &mut rng, &[2, m, 3, 2], 0.5, 0.5);
        let y = tape.complex_mul(f, w).unwrap();
        let mut sum = vec![0.0; tape.value(y).len()];
        for t in 0..k {
            let r = layout.range(t);
            let s = tape.slice(y, 1, r.start, r.end).unwrap();
            let padded = tape.pad(s, 1, r.start, m - r.end).unwrap();
            sum.iter_mut().zip(tape.value(padded)).for_each(|(a, b)| *a += b);
        }
        assert_eq!(sum, tape.value(y));
    }
}

#[test]
fn uniform_mixture_matches_direct_expansion() {
    // 1 x 8 x 2 input, all-ones filters, no dropout, p = 1/K forced
    let mut rng = SeededRng::new(8);
    let (n, d, k) = (8, 2, 3);
    let m = bin_count(n);
    let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let layout = crate::spectral::BandLayout::new(m, k).unwrap();
    let mut tape = Tape::new();
    let h = tape.constant(&[1, n, d], x.clone()).unwrap();
    let f = tape.rfft(h).unwrap();
    let ones: Vec<f64> = (0..m * d).flat_map(|_| [1.0, 0.0]).collect();
    let filter = tape.constant(&[m, d, 2], ones).unwrap();
    let gamma = tape.constant(&[d], vec![1.0; d]).unwrap();
    let beta = tape.constant(&[d], vec![0.0; d]).unwrap();
    let outs = lfm_bands(&mut tape, h, f, filter, (gamma, beta), &layout, 0.0, false, &mut rng, false).unwrap();
    let p = tape.constant(&[1, k], vec![1.0 / k as f64; k]).unwrap();
    let mixed = mix_bands(&mut tape, &outs, p).unwrap();

    let spec = rfft(&RealBatch::new(x.clone(), 1, n, d).unwrap()).unwrap();
    let mut want = vec![0.0; n * d];
    for t in 0..k {
        let band = slice_band(&spec, &layout, t).unwrap();
        let back = irfft(&zero_pad_band(&band, &layout, t, n).unwrap(), n).unwrap();
        for i in 0..n {
            let row: Vec<f64> = (0..d).map(|j| x[i * d + j] + back.data[i * d + j]).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            for j in 0..d {
                want[i * d + j] += (row[j] - mean) / (var + 1e-12).sqrt() / k as f64;
            }
        }
    }
    assert!(max_abs_diff(tape.value(mixed), &want) < 1e-9);
}

#[test]
fn gate_rows_are_distributions() {
    let mut rng = SeededRng::new(9);
    let mut tape = Tape::new();
    let h = random_leaf(&mut tape, &mut rng, &[5, 10, 3], 1.0, 0.0);
    let f = tape.rfft(h).unwrap();
    let g = gate_vars(&mut tape, &mut rng, 6, 4, false);
    let p = gate_probs(&mut tape, f, &g).unwrap();
    for row in tape.value(p).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&x| x > 0.0));
    }
    let g0 = gate_vars(&mut tape, &mut rng, 6, 4, true);
    let p = gate_probs(&mut tape, f, &g0).unwrap();
    assert!(tape.value(p).iter().all(|&x| (x - 0.25).abs() < 1e-15));
}

#[test]
fn zero_ffn_reduces_to_layer_norm() {
    let mut rng = SeededRng::new(10);
    let d = 3;
    let mut tape = Tape::new();
    let o = random_leaf(&mut tape, &mut rng, &[2, 5, d], 1.0, 0.0);
    let z = |tape: &mut Tape, s: &[usize]| tape.constant(s, vec![0.0; s.iter().product()]).unwrap();
    let p = FfnVars {
        w1: z(&mut tape, &[d, 4 * d]),
        b1: z(&mut tape, &[4 * d]),
        w2: z(&mut tape, &[4 * d, d]),
        b2: z(&mut tape, &[d]),
        gamma: tape.constant(&[d], vec![1.0; d]).unwrap(),
        beta: z(&mut tape, &[d]),
    };
    let out = ffn_block(&mut tape, o, &p, 0.2, true, &mut rng).unwrap();
    assert_eq!(tape.shape(out), [2, 5, d]);
    let want = tape.layer_norm(o, p.gamma, p.beta).unwrap();
    assert_eq!(tape.value(out), tape.value(want));
}

fn cross_user_std_per_bin(values: &[f64], users: usize, m: usize) -> Vec<f64> {
    (0..m)
        .map(|k| {
            let mut w = crate::stats::Welford::default();
            (0..users).for_each(|u| w.push(values[u * m + k]));
            w.std()
        })
        .collect()
}

#[test]
fn effective_filters_vary_across_users_only_with_uaf() {
    let mut rng = SeededRng::new(11);
    let base = ModelConfig { d: 8, n: 12, layers: 2, bands: 3, dropout: 0.0, ..ModelConfig::default() };
    let batch = random_batch(&mut rng, 6, 12, 30);
    for use_uaf in [true, false] {
        let cfg = ModelConfig { use_uaf, ..base };
        let p = ModelParams::init(&cfg, 30, 2).unwrap();
        for layer in 0..2 {
            for fa in filter_amplitudes(&p, &batch, layer).unwrap() {
                let std = cross_user_std_per_bin(&fa.values, 6, fa.m);
                if use_uaf {
                    assert!(std.iter().all(|&s| s > 0.0), "{std:?}");
                } else {
                    assert!(std.iter().all(|&s| s == 0.0));
                }
            }
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let mut rng = SeededRng::new(12);
    let cfg = ModelConfig { d: 8, n: 10, dropout: 0.3, ..ModelConfig::default() };
    let p = ModelParams::init(&cfg, 15, 4).unwrap();
    let mut batch = random_batch(&mut rng, 3, 10, 15);
    let row0 = batch.row(0).to_vec();
    batch.ids[10..20].copy_from_slice(&row0);
    let run = |rng_seed| {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &p, &batch, false, &mut SeededRng::new(rng_seed)).unwrap();
        tape.value(fwd.scores).to_vec()
    };
    let a = run(1);
    assert_eq!(a, run(2));
    assert_eq!(a[..16], a[16..32]);
}

#[test]
fn gates_sum_to_one_in_full_forward() {
    let mut rng = SeededRng::new(13);
    let cfg = ModelConfig { d: 8, n: 16, layers: 3, bands: 4, dropout: 0.2, ..ModelConfig::default() };
    let p = ModelParams::init(&cfg, 25, 5).unwrap();
    let batch = random_batch(&mut rng, 7, 16, 25);
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, &p, &batch, true, &mut rng).unwrap();
    assert_eq!(fwd.gates().len(), 3);
    for g in fwd.gates() {
        for row in tape.value(g).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9 && row.iter().all(|&x| x > 0.0));
        }
    }
    for br in &fwd.branches {
        for (i, l) in br.layers.iter().enumerate() {
            let want: &[usize] = if i == 2 { &[7, 8] } else { &[7, 16, 8] };
            assert_eq!(tape.shape(l.output), want);
            assert_eq!(tape.shape(l.filter), [7, 9, 8, 2]);
        }
        assert_eq!(br.last, br.layers[2].output);
    }
}

#[test]
fn last_position_layers_match_full_layers() {
    let mut rng = SeededRng::new(14);
    let (b, n, d) = (3, 10, 4);
    let m = bin_count(n);
    let layout = crate::spectral::BandLayout::new(m, 3).unwrap();
    let mut tape = Tape::new();
    let h = random_leaf(&mut tape, &mut rng, &[b, n, d], 1.0, 0.0);
    let filter = random_leaf(&mut tape, &mut rng, &[b, m, d, 2], 0.5, 0.5);
    let norm = (random_leaf(&mut tape, &mut rng, &[d], 0.1, 1.0), random_leaf(&mut tape, &mut rng, &[d], 0.1, 0.0));
    let gate = gate_vars(&mut tape, &mut rng, m, 3, false);
    let full = gfm_layer(&mut tape, h, filter, norm, 0.5, false, &mut rng).unwrap();
    let last = gfm_layer_last(&mut tape, h, filter, norm, 0.5, false, &mut rng).unwrap();
    let (lf, pf) = lfm_layer(&mut tape, h, filter, norm, &gate, &layout, 0.5, false, &mut rng).unwrap();
    let (ll, pl) = lfm_layer_last(&mut tape, h, filter, norm, &gate, &layout, 0.5, false, &mut rng).unwrap();
    assert_eq!(tape.value(pf), tape.value(pl));
    for (f, l) in [(full, last), (lf, ll)] {
        let fv = tape.value(f);
        let tail: Vec<f64> = (0..b).flat_map(|i| fv[(i * n + n - 1) * d..(i * n + n) * d].to_vec()).collect();
        assert!(max_abs_diff(&tail, tape.value(l)) < 1e-12);
    }
}

/// Total loss as a function of the trainable parameter values, with the
/// dropout masks fixed by cloning the same generator.
fn loss_at(p: &ModelParams, batch: &SequenceBatch, alpha: f64, beta: f64, rng: &SeededRng) -> f64 {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, p, batch, true, &mut rng.clone()).unwrap();
    let l = total_loss(&mut tape, &fwd, &batch.targets, alpha, beta).unwrap();
    tape.scalar(l.total)
}

fn full_model_gradient_check(cfg: ModelConfig, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let items = 6;
    let mut p = ModelParams::init(&cfg, items, seed).unwrap();
    // larger weights than the initializer so every path carries signal
    for t in p.tensors_mut() {
        if t.requires_grad() {
            t.values_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
        }
    }
    let batch = random_batch(&mut rng, 2, cfg.n, items);
    let masks = SeededRng::new(seed + 1);
    let (alpha, beta) = (0.1, 0.2);

    let mut tape = Tape::new();
    let fwd = forward(&mut tape, &p, &batch, true, &mut masks.clone()).unwrap();
    let l = total_loss(&mut tape, &fwd, &batch.targets, alpha, beta).unwrap();
    tape.backward(l.total).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let eps = 1e-5;
    for i in 0..p.len() {
        if !p.tensors()[i].requires_grad() {
            continue;
        }
        analytic.extend(tape.grad(fwd.params[i]).unwrap());
        for j in 0..p.tensors()[i].numel() {
            let orig = p.tensors()[i].values()[j];
            p.tensors_mut()[i].values_mut()[j] = orig + eps;
            let up = loss_at(&p, &batch, alpha, beta, &masks);
            p.tensors_mut()[i].values_mut()[j] = orig - eps;
            let down = loss_at(&p, &batch, alpha, beta, &masks);
            p.tensors_mut()[i].values_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / norm(&analytic).max(norm(&numeric));
    assert!(rel < 1e-4, "relative error {rel}");
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    full_model_gradient_check(small_config(), 21);
}

#[test]
fn full_loss_gradient_with_dropout_and_variants() {
    full_model_gradient_check(ModelConfig { dropout: 0.2, ..small_config() }, 22);
    full_model_gradient_check(ModelConfig { uaf_as_mlp: true, uaf_per_layer: true, layers: 2, ..small_config() }, 23);
    full_model_gradient_check(ModelConfig { use_gfm: false, ..small_config() }, 24);
    full_model_gradient_check(ModelConfig { use_uaf: false, use_lfm: false, ..small_config() }, 25);
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = SeededRng::new(30);
    let cfg = ModelConfig { d: 8, n: 10, layers: 2, bands: 3, dropout: 0.1, ..ModelConfig::default() };
    let p = ModelParams::init(&cfg, 20, 6).unwrap();
    let batch = random_batch(&mut rng, 8, 10, 20);
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, &p, &batch, true, &mut rng).unwrap();
    let l = total_loss(&mut tape, &fwd, &batch.targets, 0.1, 0.2).unwrap();
    tape.backward(l.total).unwrap();
    for (i, (name, t)) in p.entries().enumerate() {
        if t.requires_grad() {
            let g = tape.grad(fwd.params[i]).unwrap();
            assert!(g.iter().any(|&x| x != 0.0), "{name} has an all-zero gradient");
        }
    }
}

#[test]
fn running_statistics_follow_momentum() {
    let mut rng = SeededRng::new(31);
    let cfg = small_config();
    let mut p = ModelParams::init(&cfg, 6, 1).unwrap();
    let batch = random_batch(&mut rng, 3, 8, 6);
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, &p, &batch, true, &mut rng).unwrap();
    assert_eq!(fwd.bn_stats.len(), 2);
    let (prefix, stats) = fwd.bn_stats[0].clone();
    p.update_running_stats(&fwd.bn_stats).unwrap();
    let mean = p.get(&alloc::format!("{prefix}.running_mean")).unwrap().values();
    for (r, b) in mean.iter().zip(&stats.mean) {
        assert!((r - 0.1 * b).abs() < 1e-15);
    }
    let var = p.get(&alloc::format!("{prefix}.running_var")).unwrap().values();
    for (r, b) in var.iter().zip(&stats.var) {
        assert!((r - (0.9 + 0.1 * b)).abs() < 1e-15);
    }
}
