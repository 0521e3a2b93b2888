use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::rng::SeededRng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap().with_grad(true)
}

/// Central-difference oracle: compares the tape gradient of `f` against
/// `(f(x + eps) - f(x - eps)) / 2eps` for every input coordinate, using the
/// relative error of the whole gradient vector.
fn check<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    for (idx, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = tape.grad(vars[idx]).unwrap();
        let numeric: Vec<f64> = (0..t.numel())
            .map(|k| {
                let mut plus = inputs.to_vec();
                plus[idx].values_mut()[k] += EPS;
                let mut minus = inputs.to_vec();
                minus[idx].values_mut()[k] -= EPS;
                (eval(&plus) - eval(&minus)) / (2.0 * EPS)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-10);
        assert!(diff / scale < TOL, "input {idx}: rel err {} analytic {analytic:?} numeric {numeric:?}", diff / scale);
    }
}

/// Projects onto fixed random weights so that every output coordinate
/// contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = SeededRng::new(seed);
    let shape = tape.shape(v).to_vec();
    let n = tape.value(v).len();
    let w = tape.constant(&shape, (0..n).map(|_| rng.normal()).collect()).unwrap();
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

#[test]
fn sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(&[1], vec![0.0]).unwrap().with_grad(true));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y), [0.5]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), [0.25]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(&[2, 5], vec![0.3; 10]).unwrap();
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y) {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn sum_and_square_gradients() {
    let mut rng = SeededRng::new(1);
    let x = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert!(tape.grad(v).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    for (g, x) in tape.grad(v).unwrap().iter().zip(x.values()) {
        assert!((g - 2.0 * x).abs() < 1e-15);
    }
}

#[test]
fn lifecycle_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::filled(&[2], 1.0).with_grad(true));
    assert!(matches!(tape.grad(x), Err(crate::Error::State(_))));
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(crate::Error::State(_))));
}

#[test]
fn shape_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(crate::Error::Shape(_))));
    let c = tape.constant(&[2], vec![0.0; 2]).unwrap();
    assert!(matches!(tape.add(a, c), Err(crate::Error::Shape(_))));
    assert!(matches!(tape.dropout(a, 1.0, true, &mut SeededRng::new(0)), Err(crate::Error::Config(_))));
}

#[test]
fn dropout_identity_cases() {
    let mut rng = SeededRng::new(3);
    let mut tape = Tape::new();
    let x = tape.leaf(&random(&[4, 4], &mut rng));
    assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    for (a, b) in tape.value(y).iter().zip(tape.value(x)) {
        assert!(*a == 0.0 || (a - 2.0 * b).abs() < 1e-15);
    }
}

#[test]
fn batch_norm_eval_is_fixed_affine() {
    let mut rng = SeededRng::new(4);
    let x = random(&[2, 3, 2], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let g = tape.constant(&[2], vec![2.0, 0.5]).unwrap();
    let b = tape.constant(&[2], vec![0.1, -0.3]).unwrap();
    let (y, stats) = tape.batch_norm(xv, g, b, false, (&[1.0, -1.0], &[4.0, 0.25])).unwrap();
    assert!(stats.is_none());
    for (k, (out, inp)) in tape.value(y).iter().zip(x.values()).enumerate() {
        let want = if k % 2 == 0 {
            (inp - 1.0) / (4.0f64 + BATCH_NORM_EPS).sqrt() * 2.0 + 0.1
        } else {
            (inp + 1.0) / (0.25f64 + BATCH_NORM_EPS).sqrt() * 0.5 - 0.3
        };
        assert!((out - want).abs() < 1e-12);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = SeededRng::new(5);
    let x = random(&[3, 4], &mut rng);
    let grad_of = |ca: f64, cb: f64| {
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let g = tape.gelu(v);
        let l1 = weighted_sum(&mut tape, g, 1);
        let s = tape.sigmoid(v);
        let l2 = weighted_sum(&mut tape, s, 2);
        let a = tape.scale(l1, ca);
        let b = tape.scale(l2, cb);
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap();
        tape.grad(v).unwrap()
    };
    let g1 = grad_of(1.0, 0.0);
    let g2 = grad_of(0.0, 1.0);
    let g = grad_of(0.7, -1.3);
    for k in 0..g.len() {
        assert!((g[k] - (0.7 * g1[k] - 1.3 * g2[k])).abs() < 1e-10);
    }
}

#[test]
fn fd_matmul_and_transpose() {
    let mut rng = SeededRng::new(10);
    let ins = [random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5, 4], &mut rng)];
    check(&ins, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        let z = t.matmul_t(v[0], v[2]).unwrap();
        let w = t.transpose(v[1]).unwrap();
        let a = weighted_sum(t, y, 1);
        let b = weighted_sum(t, z, 2);
        let c = weighted_sum(t, w, 3);
        let ab = t.add(a, b).unwrap();
        t.add(ab, c).unwrap()
    });
}

#[test]
fn fd_broadcast_arithmetic() {
    let mut rng = SeededRng::new(11);
    let ins = [random(&[2, 3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[2, 3], &mut rng)];
    check(&ins, |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let p = t.mul(s, v[1]).unwrap();
        let q = t.mul_prefix(p, v[2]).unwrap();
        let r = t.scale(q, 0.3);
        let r = t.add_scalar(r, 1.5);
        let r = t.sub(r, v[0]).unwrap();
        weighted_sum(t, r, 4)
    });
}

#[test]
fn fd_concat_slice_pad_reshape() {
    let mut rng = SeededRng::new(12);
    let ins = [random(&[2, 3, 2], &mut rng), random(&[2, 1, 2], &mut rng)];
    check(&ins, |t, v| {
        let c = t.concat(&[v[0], v[1], v[0]], 1).unwrap();
        let s = t.slice(c, 1, 2, 6).unwrap();
        let p = t.pad(s, 2, 1, 2).unwrap();
        let r = t.reshape(p, &[4, 10]).unwrap();
        weighted_sum(t, r, 5)
    });
}

#[test]
fn fd_pointwise_nonlinearities() {
    let mut rng = SeededRng::new(13);
    let ins = [random(&[3, 5], &mut rng)];
    check(&ins, |t, v| {
        let a = t.sigmoid(v[0]);
        let b = t.gelu(v[0]);
        let l = t.log(a).unwrap();
        let x = weighted_sum(t, b, 6);
        let y = weighted_sum(t, l, 7);
        t.add(x, y).unwrap()
    });
}

#[test]
fn fd_softmax_mean_and_reductions() {
    let mut rng = SeededRng::new(14);
    let ins = [random(&[3, 4, 5], &mut rng)];
    check(&ins, |t, v| {
        let s = t.softmax(v[0]).unwrap();
        let m = t.mean_last(v[0]).unwrap();
        let a = weighted_sum(t, s, 8);
        let b = weighted_sum(t, m, 9);
        let c = t.mean(v[0]);
        let ab = t.add(a, b).unwrap();
        t.add(ab, c).unwrap()
    });
}

#[test]
fn fd_cross_entropy() {
    let mut rng = SeededRng::new(15);
    let ins = [random(&[3, 6], &mut rng)];
    check(&ins, |t, v| t.cross_entropy(v[0], &[1, 5, 3], true).unwrap());
    check(&ins, |t, v| t.cross_entropy(v[0], &[0, 5, 3], false).unwrap());
}

#[test]
fn fd_layer_norm() {
    let mut rng = SeededRng::new(16);
    let ins = [random(&[2, 3, 5], &mut rng), random(&[5], &mut rng), random(&[5], &mut rng)];
    check(&ins, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y, 10)
    });
}

#[test]
fn fd_batch_norm_train_and_eval() {
    let mut rng = SeededRng::new(17);
    let ins = [random(&[3, 4, 2], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    for train in [true, false] {
        check(&ins, |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], train, (&[0.2, -0.1], &[1.5, 0.7])).unwrap();
            weighted_sum(t, y, 11)
        });
    }
}

#[test]
fn fd_dropout_with_fixed_mask() {
    let mut rng = SeededRng::new(18);
    let ins = [random(&[4, 3], &mut rng)];
    check(&ins, |t, v| {
        let mut r = SeededRng::new(99);
        let y = t.dropout(v[0], 0.3, true, &mut r).unwrap();
        weighted_sum(t, y, 12)
    });
}

#[test]
fn fd_conv1d() {
    let mut rng = SeededRng::new(19);
    let ins = [random(&[2, 6, 3], &mut rng), random(&[4, 3, 3], &mut rng)];
    check(&ins, |t, v| {
        let y = t.conv1d(v[0], v[1]).unwrap();
        weighted_sum(t, y, 13)
    });
    let ins = [random(&[1, 4, 2], &mut rng), random(&[2, 2, 5], &mut rng)];
    check(&ins, |t, v| {
        let y = t.conv1d(v[0], v[1]).unwrap();
        weighted_sum(t, y, 14)
    });
}

#[test]
fn conv1d_same_padding_matches_direct_sum() {
    let mut rng = SeededRng::new(20);
    let x = random(&[2, 5, 3], &mut rng);
    let w = random(&[2, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
    let y = tape.conv1d(xv, wv).unwrap();
    let out = tape.value(y);
    for b in 0..2 {
        for i in 0..5 {
            for o in 0..2 {
                let mut want = 0.0;
                for c in 0..3 {
                    for j in 0..3 {
                        let src = i as isize + j as isize - 1;
                        if (0..5).contains(&src) {
                            want += w.values()[(o * 3 + c) * 3 + j] * x.values()[(b * 5 + src as usize) * 3 + c];
                        }
                    }
                }
                assert!((out[(b * 5 + i) * 2 + o] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fd_embedding() {
    let mut rng = SeededRng::new(21);
    let ins = [random(&[5, 3], &mut rng)];
    check(&ins, |t, v| {
        let y = t.embedding(v[0], &[0, 2, 2, 4], &[2, 2]).unwrap();
        weighted_sum(t, y, 15)
    });
}

#[test]
fn embedding_gradient_touches_only_referenced_rows() {
    let mut rng = SeededRng::new(22);
    let table = random(&[6, 2], &mut rng);
    let mut tape = Tape::new();
    let tv = tape.leaf(&table);
    let y = tape.embedding(tv, &[1, 4, 1], &[3]).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let g = tape.grad(tv).unwrap();
    assert_eq!(g, [0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let mut tape = Tape::new();
    let tv = tape.leaf(&table);
    assert!(matches!(tape.embedding(tv, &[6], &[1]), Err(crate::Error::Data(_))));
}

#[test]
fn fd_spectral_transforms() {
    let mut rng = SeededRng::new(23);
    for n in [1usize, 2, 5, 8] {
        let m = crate::spectral::bin_count(n);
        let ins = [random(&[2, n, 3], &mut rng), random(&[2, m, 3, 2], &mut rng)];
        check(&ins, |t, v| {
            let f = t.rfft(v[0]).unwrap();
            let a = weighted_sum(t, f, 16);
            let x = t.irfft(v[1], n).unwrap();
            let b = weighted_sum(t, x, 17);
            t.add(a, b).unwrap()
        });
    }
}

#[test]
fn irfft_at_matches_full_inverse() {
    let mut rng = SeededRng::new(25);
    for n in [1usize, 2, 5, 8, 50] {
        let m = crate::spectral::bin_count(n);
        let mut tape = Tape::new();
        let s = tape.leaf(&random(&[2, m, 3, 2], &mut rng));
        let full = tape.irfft(s, n).unwrap();
        for t in 0..n {
            let at = tape.irfft_at(s, n, t).unwrap();
            let fv = tape.value(full);
            for b in 0..2 {
                for j in 0..3 {
                    assert!((tape.value(at)[b * 3 + j] - fv[(b * n + t) * 3 + j]).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(tape.irfft_at(s, n, n), Err(crate::Error::Index(_))));
    }
}

#[test]
fn fd_irfft_at() {
    let mut rng = SeededRng::new(26);
    for (n, t) in [(1usize, 0usize), (4, 3), (7, 6), (8, 2)] {
        let m = crate::spectral::bin_count(n);
        let ins = [random(&[2, m, 3, 2], &mut rng)];
        check(&ins, |tp, v| {
            let x = tp.irfft_at(v[0], n, t).unwrap();
            weighted_sum(tp, x, 27)
        });
    }
}

#[test]
fn fd_complex_ops() {
    let mut rng = SeededRng::new(24);
    let ins = [random(&[2, 3, 2, 2], &mut rng), random(&[3, 2, 2], &mut rng), random(&[2, 3, 2], &mut rng)];
    check(&ins, |t, v| {
        let c = t.real_to_complex(v[2]);
        let p = t.complex_mul(c, v[1]).unwrap();
        let q = t.complex_mul(v[0], p).unwrap();
        let r = t.complex_abs(q).unwrap();
        let a = weighted_sum(t, q, 18);
        let b = weighted_sum(t, r, 19);
        t.add(a, b).unwrap()
    });
}

#[test]
fn fd_composite_chain() {
    let mut rng = SeededRng::new(25);
    let ins = [random(&[3, 4], &mut rng), random(&[4, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)];
    check(&ins, |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let g = t.gelu(h);
        let n = t.layer_norm(g, v[2], v[3]).unwrap();
        t.sum(n)
    });
}
