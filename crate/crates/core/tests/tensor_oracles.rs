//! Tensor primitives against brute-force oracles and finite differences.

use fluiddiff::rng::GaussianRng;
use fluiddiff::tensor::gradcheck::check_gradients;
use fluiddiff::{Tape, Tensor, TensorError, Var};

fn randn(rng: &mut GaussianRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Naive quadruple loop, independent of the library's index arithmetic.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b[o];
                for c in 0..ci {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * ci + c) * ks + ky) * ks + kx]
                                * x.data()[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = GaussianRng::new(1);
    for (shape, kshape, stride, pad) in [
        ([1, 5, 5], [1, 1, 3, 3], 1, 0),
        ([2, 7, 6], [3, 2, 3, 3], 2, 1),
        ([3, 8, 8], [2, 3, 4, 4], 2, 1),
    ] {
        let x = randn(&mut rng, &shape);
        let k = randn(&mut rng, &kshape);
        let b = randn(&mut rng, &[kshape[0]]);
        let expected = conv_oracle(&x, &k, b.data(), stride, pad);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b));
        let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn conv_transpose_is_the_adjoint() {
    for seed in 0..10 {
        let mut rng = GaussianRng::new(100 + seed);
        for (xs, ks, stride, pad) in [([2, 8, 8], [3, 2, 4, 4], 2, 1), ([3, 6, 6], [2, 3, 3, 3], 1, 1), ([1, 9, 9], [2, 1, 3, 3], 2, 1)] {
            let x = randn(&mut rng, &xs);
            let k = randn(&mut rng, &ks);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.constant(k);
            let zero_c = tape.constant(Tensor::zeros(&[ks[0]]));
            let zero_t = tape.constant(Tensor::zeros(&[ks[1]]));
            let cx = tape.conv2d(xv, kv, zero_c, stride, pad).unwrap();
            let y = randn(&mut rng, tape.shape(cx));
            let yv = tape.constant(y.clone());
            let ty = tape.conv2d_transpose(yv, kv, zero_t, stride, pad).unwrap();
            assert_eq!(tape.shape(ty), x.shape());
            let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(tape.value(ty).data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn group_norm_moments() {
    let mut rng = GaussianRng::new(2);
    let x = Tensor::from_fn(&[4, 4, 4], |_| 3.0 + 2.0 * rng.normal());
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.group_norm(xv, 2, g, b, 1e-5).unwrap();
    for chunk in tape.value(y).data().chunks(32) {
        let m = chunk.iter().sum::<f64>() / 32.0;
        let v = chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 32.0;
        assert!(m.abs() < 1e-6, "{m}");
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }
    // one group spans every entry
    let y1 = tape.group_norm(xv, 1, g, b, 1e-5).unwrap();
    let all = tape.value(y1).data();
    let m = all.iter().sum::<f64>() / 64.0;
    assert!(m.abs() < 1e-6);
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = GaussianRng::new(3);
    let w = randn(&mut rng, &[8, 8]);
    let x = randn(&mut rng, &[8]);
    let b = randn(&mut rng, &[8]);
    let mut expected = b.data().to_vec();
    for i in 0..8 {
        for j in 0..8 {
            expected[i] += w.data()[i * 8 + j] * x.data()[j];
        }
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(b));
    let y = tape.linear(xv, wv, bv).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
    let eye = tape.constant(Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 }));
    let zero = tape.constant(Tensor::zeros(&[8]));
    let y = tape.linear(xv, eye, zero).unwrap();
    assert_eq!(tape.value(y), &x);
}

/// Dense attention oracle written directly from the definition.
fn attention_oracle(x: &Tensor<f64>, wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>, wo: &Tensor<f64>) -> Vec<f64> {
    let (c, n) = (x.shape()[0], x.shape()[1]);
    let d = wq.shape()[0];
    let proj = |w: &Tensor<f64>, rows: usize| {
        let mut out = vec![vec![0.0; n]; rows];
        for r in 0..rows {
            for p in 0..n {
                out[r][p] = (0..c).map(|i| w.data()[r * c + i] * x.data()[i * n + p]).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(wq, d), proj(wk, d), proj(wv, c));
    let mut out = vec![0.0; c * n];
    for qi in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|kj| (0..d).map(|r| k[r][kj] * q[r][qi]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let weights: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let mixed: Vec<f64> = (0..c).map(|r| (0..n).map(|kj| v[r][kj] * weights[kj]).sum()).collect();
        for r in 0..c {
            out[r * n + qi] = (0..c).map(|i| wo.data()[r * c + i] * mixed[i]).sum::<f64>() + x.data()[r * n + qi];
        }
    }
    out
}

#[test]
fn attention_matches_dense_oracle() {
    let mut rng = GaussianRng::new(4);
    let x = randn(&mut rng, &[4, 9]);
    let ws: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::from_fn(&[4, 4], |_| 0.5 * rng.normal())).collect();
    let expected = attention_oracle(&x, &ws[0], &ws[1], &ws[2], &ws[3]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv: Vec<Var> = ws.iter().map(|w| tape.constant(w.clone())).collect();
    let y = tape.self_attention(xv, wv[0], wv[1], wv[2], wv[3]).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn attention_with_zero_queries_is_mean_pooling() {
    let mut rng = GaussianRng::new(5);
    let x = randn(&mut rng, &[3, 6]);
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wq = tape.constant(Tensor::zeros(&[3, 3]));
    let wk = tape.constant(randn(&mut rng, &[3, 3]));
    let wv = tape.constant(eye.clone());
    let wo = tape.constant(eye);
    let y = tape.self_attention(xv, wq, wk, wv, wo).unwrap();
    for r in 0..3 {
        let mean = x.data()[r * 6..(r + 1) * 6].iter().sum::<f64>() / 6.0;
        for p in 0..6 {
            let pooled = tape.value(y).data()[r * 6 + p] - x.data()[r * 6 + p];
            assert!((pooled - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = GaussianRng::new(6);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 8, 8], |_| rng.normal() as f32));
        let k = tape.constant(Tensor::from_fn(&[4, 3, 3, 3], |_| rng.normal() as f32));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let g = tape.constant(Tensor::ones(&[4]));
        let z = tape.group_norm(y, 2, g, b, 1e-5).unwrap();
        let z = tape.silu(z).unwrap();
        tape.value(z).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

// ---- finite-difference suite ----

const H: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-4;

/// Contracts an output with fixed random weights so every output entry matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = GaussianRng::new(seed ^ 0xABCD);
    let w = tape.constant(Tensor::from_fn(tape.shape(y), |_| rng.normal()));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_grad<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let report = check_gradients(&inputs, H, None, |tape, v| {
        let y = f(tape, v)?;
        if tape.value(y).numel() == 1 {
            Ok(y)
        } else {
            weighted_sum(tape, y, seed)
        }
    })
    .unwrap();
    assert!(report.max_rel_err < PRIMITIVE_TOL, "{name} seed {seed}: {report:?}");
}

#[test]
fn finite_differences_every_primitive() {
    for seed in 0..10u64 {
        let mut rng = GaussianRng::new(1000 + seed);
        let mut r = |s: &[usize]| randn(&mut rng, s);

        assert_grad("conv2d", vec![r(&[2, 5, 5]), r(&[3, 2, 3, 3]), r(&[3])], seed, |t, v| t.conv2d(v[0], v[1], v[2], 1, 1));
        assert_grad("conv2d stride 2", vec![r(&[2, 6, 6]), r(&[2, 2, 3, 3]), r(&[2])], seed, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1));
        assert_grad("conv2d_transpose", vec![r(&[2, 3, 3]), r(&[2, 3, 4, 4]), r(&[3])], seed, |t, v| {
            t.conv2d_transpose(v[0], v[1], v[2], 2, 1)
        });
        assert_grad("group_norm", vec![r(&[4, 3, 3]), r(&[4]), r(&[4])], seed, |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5));
        assert_grad("silu", vec![r(&[10])], seed, |t, v| t.silu(v[0]));
        assert_grad("linear", vec![r(&[5]), r(&[4, 5]), r(&[4])], seed, |t, v| t.linear(v[0], v[1], v[2]));
        assert_grad("self_attention", vec![r(&[3, 5]), r(&[3, 3]), r(&[3, 3]), r(&[3, 3]), r(&[3, 3])], seed, |t, v| {
            t.self_attention(v[0], v[1], v[2], v[3], v[4])
        });
        assert_grad("concat_channels", vec![r(&[1, 3, 3]), r(&[2, 3, 3])], seed, |t, v| t.concat_channels(v[0], v[1]));
        assert_grad("add", vec![r(&[2, 3]), r(&[2, 3])], seed, |t, v| t.add(v[0], v[1]));
        assert_grad("mean", vec![r(&[7])], seed, |t, v| {
            let s = t.square(v[0])?;
            t.mean(s)
        });
        assert_grad("add_channel", vec![r(&[3, 2, 2]), r(&[3])], seed, |t, v| t.add_channel(v[0], v[1]));
        assert_grad("mse", vec![r(&[2, 4]), r(&[2, 4])], seed, |t, v| t.mse(v[0], v[1]));
        assert_grad("slice/reshape", vec![r(&[3, 2, 2])], seed, |t, v| {
            let s = t.slice_channels(v[0], 1, 2)?;
            t.reshape(s, &[2, 4])
        });
    }
}
