use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtgan_core::tensor::gradcheck::{self, relative_error};
use vtgan_core::tensor::{conv_out_side, conv_transpose_out_side, Adam, AdamConfig, TensorError};
use vtgan_core::{Tape, Tensor};

fn t32(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cross-correlation by explicit index loops.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [f, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for b in 0..n {
        for o in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let r = (i * stride + p) as isize - pad as isize;
                                let s = (j * stride + q) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ch) * h + r as usize) * wd + s as usize]
                                    * w.data()[((o * c + ch) * kh + p) * kw + q];
                            }
                        }
                    }
                    out.data_mut()[((b * f + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution by scattering every input cell through the kernel.
fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [_, f, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    let v = x.data()[((b * c + ch) * h + i) * wd + j];
                    for o in 0..f {
                        for p in 0..kh {
                            for q in 0..kw {
                                let r = (i * stride + p) as isize - pad as isize;
                                let s = (j * stride + q) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= oh as isize || s >= ow as isize {
                                    continue;
                                }
                                out.data_mut()[((b * f + o) * oh + r as usize) * ow + s as usize] +=
                                    v * w.data()[((ch * f + o) * kh + p) * kw + q];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_shape_and_zero_input() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64])).unwrap();
    let w = tape.constant(Tensor::randn(&[8, 1, 4, 4], 1.0, &mut rng(0))).unwrap();
    let y = tape.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 8, 32, 32]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_rejects_channel_mismatch_and_non_finite() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5])).unwrap();
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    assert!(matches!(tape.conv2d(x, w, 1, 0), Err(TensorError::Dimension { .. })));

    let bad = t32(&[1, 1, 2, 2], &[0.0, f32::NAN, 0.0, 0.0]);
    assert!(matches!(tape.constant(bad), Err(TensorError::NonFinite { .. })));
}

#[test]
fn conv2d_sum_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let x = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let err = gradcheck::check(&[x, w], |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 0)?;
        t.sum(y)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_transpose2d_shapes() {
    let mut tape = Tape::<f32>::new();
    let z = tape.constant(Tensor::randn(&[1, 100, 1, 1], 1.0, &mut rng(2))).unwrap();
    let k = tape.constant(Tensor::randn(&[100, 8, 4, 4], 0.02, &mut rng(3))).unwrap();
    let y = tape.conv_transpose2d(z, k, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 8, 4, 4]);

    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4])).unwrap();
    let k = tape.constant(Tensor::zeros(&[1, 5, 4, 4])).unwrap();
    let y = tape.conv_transpose2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 5, 8, 8]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut r = rng(4);
    for _ in 0..5 {
        let x = Tensor::<f64>::randn(&[2, 3, 7, 7], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone()).unwrap();
        let kv = tape.constant(k.clone()).unwrap();
        let y = tape.conv2d(xv, kv, 2, 1).unwrap();
        let yr = Tensor::<f64>::randn(tape.shape(y), 1.0, &mut r);
        let lhs = tape.value(y).dot(&yr);
        // The conv kernel [F, C, kh, kw] read as [C_in=F, C_out=C] is exactly the
        // layout conv_transpose2d expects.
        let yv = tape.constant(yr).unwrap();
        let back = tape.conv_transpose2d(yv, kv, 2, 1).unwrap();
        assert_eq!(tape.shape(back), x.shape());
        let rhs = x.dot(tape.value(back));
        assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-5, "{lhs} vs {rhs}");
    }
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[1, 1, 4, 4], 0.5)).unwrap();
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    #[rustfmt::skip]
    let expected = [
        1.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        1.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
    ];
    assert_eq!(g.data(), &expected);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    assert!(matches!(tape.maxpool2d(x, 3, 1), Err(TensorError::Dimension { .. })));
}

#[test]
fn maxpool_gradient_on_random_6x6() {
    let x = Tensor::<f64>::randn(&[1, 1, 6, 6], 1.0, &mut rng(5));
    let err = gradcheck::check(&[x], |t, v| {
        let y = t.maxpool2d(v[0], 2, 2)?;
        let sq = t.square(y)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn dense_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0])).unwrap();
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    let y = tape.dense(x, eye, Some(b)).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let x = tape.constant(t32(&[1, 2], &[1.0, 1.0])).unwrap();
    let w = tape.constant(t32(&[2, 1], &[2.0, 3.0])).unwrap();
    let y = tape.dense(x, w, None).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);

    let w = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
    assert!(tape.dense(x, w, None).is_err());
}

#[test]
fn activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let l = tape.leaky_relu(x, 0.2).unwrap();
    assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 2.0]);
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).data()[1], 0.5);

    let big = tape.constant(t64(&[2], &[-40.0, 40.0])).unwrap();
    let s = tape.sigmoid(big).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0 || v == 1.0));

    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng(6));
    let err = gradcheck::check(&[x], |t, v| {
        let y = t.tanh(v[0])?;
        t.sum(y)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batchnorm_examples() {
    // Two samples per channel at ±1: mean 0, biased variance 1.
    let x = t64(&[2, 1, 1, 1], &[1.0, -1.0]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone()).unwrap();
    let g = tape.constant(Tensor::full(&[1], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    let (y, _) = tape.batchnorm_train(xv, g, b, 1e-5).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - e).abs() < 1e-4);
    }

    let xv = tape.constant(Tensor::randn(&[4, 3, 2, 2], 1.0, &mut rng(7))).unwrap();
    let g = tape.constant(Tensor::zeros(&[3])).unwrap();
    let beta = tape.constant(t64(&[3], &[0.5, -1.0, 2.0])).unwrap();
    let (y, _) = tape.batchnorm_train(xv, g, beta, 1e-5).unwrap();
    for (i, v) in tape.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0][(i / 4) % 3]);
    }

    let single = tape.constant(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
    let g = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(tape.batchnorm_train(single, g, b, 1e-5), Err(TensorError::DegenerateVariance(_))));
}

#[test]
fn batchnorm_gradient_on_2x3x4x4() {
    let mut r = rng(8);
    let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let g = Tensor::<f64>::randn(&[3], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[3], 1.0, &mut r);
    let proj = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let err = gradcheck::check(&[x, g, b], |t, v| {
        let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
        gradcheck::project(t, y, &proj)
    })
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn bce_examples() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::full(&[4, 1], 0.5)).unwrap();
    let loss = tape.bce(p, &t64(&[4, 1], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let targets = t64(&[3, 1], &[1.0, 0.0, 1.0]);
    let p = tape.constant(targets.clone()).unwrap();
    let loss = tape.bce(p, &targets).unwrap();
    assert!(tape.value(loss).data()[0] <= 1e-6);

    let mut r = rng(9);
    let pv = Tensor::<f64>::from_fn(&[16, 1], |i| 0.02 + 0.96 * ((i * 37 % 16) as f64 / 15.0));
    let tv = Tensor::<f64>::from_fn(&[16, 1], |_| if rand::Rng::random::<bool>(&mut r) { 1.0 } else { 0.0 });
    let p = tape.constant(pv.clone()).unwrap();
    let loss = tape.bce(p, &tv).unwrap();
    let mut expected = 0.0;
    for (p, t) in pv.data().iter().zip(tv.data()) {
        expected -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    expected /= 16.0;
    assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);

    let p = tape.constant(Tensor::full(&[2, 1], 0.5)).unwrap();
    assert!(tape.bce(p, &Tensor::zeros(&[3, 1])).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::randn(&[2, 3, 2], 1.0, &mut rng(10))).unwrap();
    let unused = tape.param(Tensor::zeros(&[4])).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    assert!(tape.grad(unused).unwrap().data().iter().all(|&g| g == 0.0));
    assert!(matches!(tape.backward(s), Err(TensorError::Lifecycle(_))));

    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[2], &[1.0, 2.0])).unwrap();
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2])).unwrap();
    assert!(tape.backward(x).is_err(), "non-scalar loss");
}

#[test]
fn composite_graph_gradient() {
    let mut r = rng(11);
    let x = Tensor::<f64>::randn(&[2, 1, 6, 6], 1.0, &mut r);
    let k = Tensor::<f64>::randn(&[2, 1, 3, 3], 0.5, &mut r);
    let w = Tensor::<f64>::randn(&[8, 1], 0.5, &mut r);
    let targets = t64(&[2, 1], &[1.0, 0.0]);
    let err = gradcheck::check(&[x, k, w], |t, v| {
        let c = t.conv2d(v[0], v[1], 1, 0)?;
        let p = t.maxpool2d(c, 2, 2)?;
        let f = t.reshape(p, &[2, 8])?;
        let d = t.dense(f, v[2], None)?;
        let s = t.sigmoid(d)?;
        t.bce(s, &targets)
    })
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn adam_ten_steps_on_square() {
    let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut opt = Adam::<f64>::new(cfg, &[1]);
    let mut w = [1.0f64];
    let mut prev = w[0] * w[0];
    for _ in 0..10 {
        let g = [2.0 * w[0]];
        opt.step(&mut [&mut w[..]], &[&g[..]]).unwrap();
        let f = w[0] * w[0];
        assert!(f < prev);
        prev = f;
    }
    assert_eq!(opt.step_count(), 10);
}

#[test]
fn every_op_passes_gradient_check() {
    let mut r = rng(12);
    for (name, op) in gradcheck::op_suite() {
        for trial in 0..5 {
            let err = op(&mut r).unwrap();
            assert!(err < 1e-4, "{name} trial {trial}: {err}");
        }
    }
}

#[test]
fn forward_backward_is_bit_identical() {
    let run = || {
        let mut r = rng(13);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::randn(&[4, 1, 16, 16], 1.0, &mut r)).unwrap();
        let k = tape.param(Tensor::randn(&[8, 1, 4, 4], 0.1, &mut r)).unwrap();
        let c = tape.conv2d(x, k, 2, 1).unwrap();
        let a = tape.leaky_relu(c, 0.2).unwrap();
        let m = tape.mean(a).unwrap();
        tape.backward(m).unwrap();
        (tape.value(m).clone(), tape.grad(k).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_index_loop_oracle(
        n in 1usize..3, c in 1usize..3, f in 1usize..3,
        side in 1usize..9, k in 1usize..9, stride in 1usize..4, pad in 0usize..4, seed in any::<u64>(),
    ) {
        prop_assume!(side + 2 * pad >= k);
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[n, c, side, side], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[f, c, k, k], 1.0, &mut r);
        let expected = conv_oracle(&x, &w, stride, pad);
        prop_assert_eq!(conv_out_side(side, k, stride, pad).unwrap(), expected.shape()[2]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x).unwrap();
        let wv = tape.constant(w).unwrap();
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), expected.shape());
        prop_assert!(relative_error(tape.value(y).data(), expected.data()) < 1e-12);
    }

    #[test]
    fn conv_transpose_matches_scatter_oracle(
        c in 1usize..3, f in 1usize..3,
        side in 1usize..6, k in 1usize..9, stride in 1usize..4, pad in 0usize..4, seed in any::<u64>(),
    ) {
        prop_assume!((side - 1) * stride + k > 2 * pad);
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[1, c, side, side], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[c, f, k, k], 1.0, &mut r);
        let expected = conv_transpose_oracle(&x, &w, stride, pad);
        prop_assert_eq!(conv_transpose_out_side(side, k, stride, pad).unwrap(), expected.shape()[2]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x).unwrap();
        let wv = tape.constant(w).unwrap();
        let y = tape.conv_transpose2d(xv, wv, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), expected.shape());
        prop_assert!(relative_error(tape.value(y).data(), expected.data()) < 1e-12);
    }

    #[test]
    fn conv_transpose_inner_product_identity(
        side in 3usize..9, k in 1usize..5, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(side + 2 * pad >= k && (side + 2 * pad - k) % stride == 0 && k > pad);
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[1, 2, side, side], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[3, 2, k, k], 1.0, &mut r);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(w).unwrap();
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let yr = Tensor::<f64>::randn(tape.shape(y), 1.0, &mut r);
        let lhs = tape.value(y).dot(&yr);
        let yv = tape.constant(yr).unwrap();
        let back = tape.conv_transpose2d(yv, wv, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(back), x.shape());
        let rhs = x.dot(tape.value(back));
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-12));
    }
}
