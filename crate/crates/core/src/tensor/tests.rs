use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for r in 0..oh {
                for c in 0..ow {
                    let mut s = 0.0;
                    for i in 0..ci {
                        for a in 0..kh {
                            for e in 0..kw {
                                let ih = (r * stride + a) as isize - pad as isize;
                                let iw = (c * stride + e) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    s += x.get(&[b, i, ih as usize, iw as usize]) * k.get(&[o, i, a, e]);
                                }
                            }
                        }
                    }
                    out.set(&[b, o, r, c], s);
                }
            }
        }
    }
    out
}

fn gradcheck<F>(inputs: &[Tensor], f: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> crate::Result<Var<'g>>,
{
    check_gradients(inputs, f, FD_STEP, None, 0).unwrap()
}

#[test]
fn matmul_identity_and_zero() {
    let g = Graph::new();
    let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    assert_eq!(i2.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let any = g.constant(Tensor::uniform(&[3, 4], -3.0, 3.0, &mut rng(1)));
    let out = z.matmul(any).unwrap();
    assert_eq!(out.shape(), vec![2, 4]);
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(2);
    let a = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut r);
    let g = Graph::new();
    let out = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap();
    assert!(out.value().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    let s = g.constant(t(&[2], &[0., 0.])).softmax(0).unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);

    for c in [-7.0, 0.0, 3.5, 1e3] {
        let s = g.constant(t(&[3], &[c, c, c])).softmax(0).unwrap();
        for v in s.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    let s = g.constant(t(&[3], &[1., 2., 3.])).softmax(0).unwrap();
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    for (i, v) in s.value().data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() <= 1e-12);
    }
}

#[test]
fn softmax_rejects_nan() {
    let g = Graph::new();
    let err = g.constant(t(&[2], &[f64::NAN, 0.])).softmax(0).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

#[test]
fn softmax_over_middle_axis() {
    let g = Graph::new();
    let x = Tensor::uniform(&[2, 3, 4], -2.0, 2.0, &mut rng(3));
    let s = g.constant(x).softmax(1).unwrap().value();
    for a in 0..2 {
        for c in 0..4 {
            let total: f64 = (0..3).map(|b| s.get(&[a, b, c])).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_identity_and_zero_kernels() {
    let x = Tensor::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng(4));
    let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        eye.set(&[c, c, 0, 0], 1.0);
    }
    let g = Graph::new();
    let out = g.constant(x.clone()).conv2d(g.constant(eye), None, 1, 0).unwrap();
    assert_eq!(*out.value(), x);

    let zero = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let out = g.constant(x).conv2d(zero, None, 1, 1).unwrap();
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_sliding_window() {
    let mut r = rng(5);
    let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let g = Graph::new();
    let out = g.constant(x.clone()).conv2d(g.constant(k.clone()), None, 1, 1).unwrap();
    assert_eq!(out.shape(), vec![1, 3, 4, 4]);
    assert!(out.value().max_abs_diff(&naive_conv(&x, &k, 1, 1)) <= 1e-10);

    for (h, w, s, p) in [(5, 4, 2, 1), (7, 3, 2, 0), (6, 6, 3, 1), (3, 3, 1, 0)] {
        let x = Tensor::uniform(&[2, 2, h, w], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
        if h + 2 * p < 3 || w + 2 * p < 3 {
            continue;
        }
        let out = g.constant(x.clone()).conv2d(g.constant(k.clone()), None, s, p).unwrap();
        assert!(out.value().max_abs_diff(&naive_conv(&x, &k, s, p)) <= 1e-10);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[3, 5, 1, 1]));
    assert!(matches!(x.conv2d(k, None, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn adaptive_pool_examples() {
    let g = Graph::new();
    let x = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng(6));
    let same = g.constant(x.clone()).adaptive_avg_pool2d(3, 3).unwrap();
    assert_eq!(*same.value(), x);

    let c = g.constant(Tensor::full(&[1, 1, 4, 4], 2.5)).adaptive_avg_pool2d(2, 2).unwrap();
    assert!(c.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

    let ramp = Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64);
    let p = g.constant(ramp).adaptive_avg_pool2d(2, 2).unwrap();
    assert_eq!(p.value().data(), &[3.5, 5.5, 11.5, 13.5]);

    let x = Tensor::uniform(&[2, 3, 5, 3], -1.0, 1.0, &mut rng(7));
    let gp = g.constant(x.clone()).adaptive_avg_pool2d(1, 1).unwrap();
    for plane in 0..6 {
        let mean = x.data()[plane * 15..(plane + 1) * 15].iter().sum::<f64>() / 15.0;
        assert!((gp.value().data()[plane] - mean).abs() <= 1e-9);
    }

    assert!(g.constant(x.clone()).adaptive_avg_pool2d(0, 1).is_err());
    assert!(g.constant(x).adaptive_avg_pool2d(6, 1).is_err());
}

#[test]
fn pointwise_examples() {
    let g = Graph::new();
    assert_eq!(g.constant(Tensor::scalar(0.0)).sigmoid().value().item(), 0.5);
    let r = g.constant(t(&[2], &[-1.0, 2.0])).relu();
    assert_eq!(r.value().data(), &[0.0, 2.0]);
    let big = g.constant(t(&[2], &[-800.0, 800.0])).sigmoid();
    assert!(big.value().all_finite());
}

#[test]
fn broadcasting_is_singleton_only() {
    let g = Graph::new();
    let a = g.constant(Tensor::ones(&[2, 1, 3, 3]));
    let b = g.constant(Tensor::full(&[2, 4, 1, 1], 2.0));
    let c = a.mul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 4, 3, 3]);
    assert!(c.value().data().iter().all(|&v| v == 2.0));

    let bad = g.constant(Tensor::ones(&[2, 3]));
    let other = g.constant(Tensor::ones(&[2, 2]));
    assert!(matches!(bad.add(other), Err(Error::Dimension(_))));
    let rank = g.constant(Tensor::ones(&[3]));
    assert!(matches!(bad.add(rank), Err(Error::Dimension(_))));
}

#[test]
fn batch_norm_standardizes_each_channel() {
    // Channel c: values 3 ± 2 (mean 3, population std 2).
    let mut x = Tensor::zeros(&[4, 2, 1, 2]);
    for n in 0..4 {
        for c in 0..2 {
            for s in 0..2 {
                let sign = if (n + s) % 2 == 0 { 1.0 } else { -1.0 };
                x.set(&[n, c, 0, s], 3.0 + 2.0 * sign);
            }
        }
    }
    let g = Graph::new();
    let (y, stats) = g
        .constant(x)
        .batch_norm_train(g.constant(Tensor::ones(&[2])), g.constant(Tensor::zeros(&[2])), 1e-5)
        .unwrap();
    assert!((stats.mean[0] - 3.0).abs() < 1e-12);
    let y = y.value();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..2).map(move |s| (n, s)))
            .map(|(n, s)| y.get(&[n, c, 0, s]))
            .collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
        // eps keeps the std a hair under 1: 2 / sqrt(4 + eps).
        let expected = 2.0 / (4.0f64 + 1e-5).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - expected).abs() < 1e-6);
        assert!((std - 1.0).abs() < 2e-6);
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let g = Graph::new();
    let x = g.param(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng(8)));
    x.sum().backward().unwrap();
    assert!(x.grad().unwrap().data().iter().all(|&v| v == 1.0));

    let g = Graph::new();
    let x = g.param(t(&[3], &[1., 2., 3.]));
    x.mul(x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn backward_requires_scalar() {
    let g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(matches!(x.scale(2.0).backward(), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_and_resets() {
    let g = Graph::new();
    let x = g.param(t(&[3], &[1., -2., 0.5]));
    let y = x.mul(x).unwrap().sigmoid().sum();
    y.backward().unwrap();
    let first = x.grad().unwrap();
    y.backward().unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in first.data().iter().zip(twice.data()) {
        assert!((2.0 * a - b).abs() < 1e-15);
    }
    g.zero_grad();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), first);
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let c = g.constant(Tensor::ones(&[2]));
    let p = g.param(Tensor::ones(&[2]));
    c.mul(p).unwrap().sum().backward().unwrap();
    assert!(c.grad().is_none());
    assert!(p.grad().is_some());
}

#[test]
fn gradcheck_matmul_and_batched() {
    let mut r = rng(9);
    let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
    let rep = gradcheck(&[a, b], |_, v| random_projection(v[0].matmul(v[1])?, 1));
    assert!(rep.passes(FD_TOL), "{rep:?}");

    let a = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[2, 4, 3], -1.0, 1.0, &mut r);
    let rep = gradcheck(&[a, b], |_, v| random_projection(v[0].matmul(v[1])?, 2));
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn gradcheck_softmax_family() {
    let x = Tensor::uniform(&[2, 3, 4], -2.0, 2.0, &mut rng(10));
    for axis in 0..3 {
        let rep = gradcheck(&[x.clone()], |_, v| random_projection(v[0].softmax(axis)?, 3));
        assert!(rep.passes(FD_TOL), "softmax axis {axis}: {rep:?}");
        let rep = gradcheck(&[x.clone()], |_, v| random_projection(v[0].log_softmax(axis)?, 4));
        assert!(rep.passes(FD_TOL), "log_softmax axis {axis}: {rep:?}");
    }
}

#[test]
fn gradcheck_conv_variants() {
    let mut r = rng(11);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let x = Tensor::uniform(&[2, 2, 5, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, k, k], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let rep = gradcheck(&[x, w, b], move |_, v| {
            random_projection(v[0].conv2d(v[1], Some(v[2]), stride, pad)?, 5)
        });
        assert!(rep.passes(FD_TOL), "stride {stride} pad {pad} k {k}: {rep:?}");
    }
}

#[test]
fn gradcheck_pool_and_reductions() {
    let x = Tensor::uniform(&[2, 2, 5, 3], -1.0, 1.0, &mut rng(12));
    let rep = gradcheck(&[x.clone()], |_, v| random_projection(v[0].adaptive_avg_pool2d(2, 2)?, 6));
    assert!(rep.passes(FD_TOL), "{rep:?}");
    let rep = gradcheck(&[x.clone()], |_, v| random_projection(v[0].mean_axes(&[1, 3], false)?, 7));
    assert!(rep.passes(FD_TOL), "{rep:?}");
    let rep = gradcheck(&[x], |_, v| random_projection(v[0].sum_axes(&[0], true)?, 8));
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn gradcheck_pointwise_and_broadcast() {
    let mut r = rng(13);
    let a = Tensor::uniform(&[2, 1, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[2, 4, 1], -1.0, 1.0, &mut r);
    let rep = gradcheck(&[a, b], |_, v| {
        let s = v[0].add(v[1])?.sigmoid();
        let m = v[0].mul(v[1])?.relu();
        let d = v[0].sub(v[1])?.scale(0.7).add_scalar(0.3);
        random_projection(s.add(m)?.add(d)?, 9)
    });
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn gradcheck_shape_ops() {
    let x = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng(14));
    let rep = gradcheck(&[x], |_, v| {
        let p = v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
        let q = p.transpose()?;
        random_projection(q.matmul(p)?, 10)
    });
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn gradcheck_batch_norm_both_modes() {
    let mut r = rng(15);
    let x = Tensor::uniform(&[3, 2, 2, 2], -1.0, 2.0, &mut r);
    let gam = Tensor::uniform(&[2], 0.5, 1.5, &mut r);
    let bet = Tensor::uniform(&[2], -0.5, 0.5, &mut r);
    let rep = gradcheck(&[x.clone(), gam.clone(), bet.clone()], |_, v| {
        random_projection(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, 11)
    });
    assert!(rep.passes(FD_TOL), "{rep:?}");
    let rep = gradcheck(&[x, gam, bet], |_, v| {
        random_projection(v[0].batch_norm_eval(v[1], v[2], &[0.3, -0.1], &[1.2, 0.7], 1e-5)?, 12)
    });
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn gradcheck_gather_and_distances() {
    let x = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng(16));
    let rep = gradcheck(&[x], |_, v| {
        let d = v[0].pairwise_distances()?;
        random_projection(d.gather(&[1, 7, 13, 7, 24])?, 13)
    });
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn gradcheck_standardize_and_correlation() {
    let x = Tensor::uniform(&[6, 4, 3], -1.0, 1.0, &mut rng(17));
    let rep = gradcheck(&[x.clone()], |_, v| random_projection(v[0].standardize(1e-5)?, 14));
    assert!(rep.passes(FD_TOL), "{rep:?}");
    let rep = gradcheck(&[x.clone()], |_, v| random_projection(v[0].cross_frame_correlation(3)?, 15));
    assert!(rep.passes(FD_TOL), "{rep:?}");
    let rep = gradcheck(&[x], |_, v| {
        random_projection(v[0].standardize(1e-5)?.cross_frame_correlation(2)?, 16)
    });
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn gradcheck_composite_graph() {
    // conv -> relu -> pool -> matmul -> softmax -> sum
    let mut r = rng(18);
    let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let m = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut r);
    let rep = gradcheck(&[x, k, m], |_, v| {
        let h = v[0].conv2d(v[1], None, 1, 1)?.relu().adaptive_avg_pool2d(2, 2)?;
        let h = h.reshape(&[3, 4])?.matmul(v[2])?.softmax(1)?;
        random_projection(h, 17)
    });
    assert!(rep.passes(FD_TOL), "{rep:?}");
}

#[test]
fn reshape_round_trip_is_identity() {
    let x = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng(19));
    let g = Graph::new();
    let back = g.constant(x.clone()).reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
    assert_eq!(*back.value(), x);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        vals in proptest::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = vals.len();
        let g = Graph::new();
        let a = g.constant(t(&[n], &vals)).softmax(0).unwrap().value();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let b = g.constant(t(&[n], &shifted)).softmax(0).unwrap().value();
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
        prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pool_to_one_is_mean(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let x = Tensor::uniform(&[1, 1, h, w], -5.0, 5.0, &mut rng(seed));
        let g = Graph::new();
        let p = g.constant(x.clone()).adaptive_avg_pool2d(1, 1).unwrap().value().item();
        let mean = x.data().iter().sum::<f64>() / (h * w) as f64;
        prop_assert!((p - mean).abs() <= 1e-9);
    }

    #[test]
    fn reshape_preserves_data(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let x = Tensor::from_fn(&[a, b, c], |i| i as f64 * 0.5);
        let g = Graph::new();
        let y = g.constant(x.clone()).reshape(&[c, a * b]).unwrap().reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(&*y.value(), &x);
    }
}

#[test]
fn gradcheck_excludes_probes_across_relu_kinks() {
    let x = Tensor::new(&[3], vec![0.0, 1.0, -2.0]).unwrap();
    let rep = gradcheck(&[x], |_, v| Ok(v[0].relu().sum()));
    assert_eq!((rep.coordinates, rep.kink_skips), (2, 1));
    assert!(rep.max_rel_error < 1e-9);
    assert!(!rep.passes(1e-4), "a third of the probes were excluded");
    let far = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
    let rep = gradcheck(&[far], |_, v| Ok(v[0].relu().sum()));
    assert_eq!(rep.kink_skips, 0);
    assert!(rep.passes(1e-4));
}
