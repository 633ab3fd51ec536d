use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{Mode, ParamStore};
use crate::tensor::{check_gradients, random_projection};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent NCC used only by the oracles below.
fn oracle_ncc(p: &[f64], q: &[f64]) -> f64 {
    let d = p.len() as f64;
    let (mut mp, mut mq) = (0.0, 0.0);
    for i in 0..p.len() {
        mp += p[i];
        mq += q[i];
    }
    mp /= d;
    mq /= d;
    let (mut vp, mut vq, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        vp += (p[i] - mp) * (p[i] - mp);
        vq += (q[i] - mq) * (q[i] - mq);
        cov += (p[i] - mp) * (q[i] - mq);
    }
    (cov / d) / (((vp / d).sqrt() + NCC_EPS) * ((vq / d).sqrt() + NCC_EPS))
}

/// Quadruple loop over (k ≠ t, h, w) × (i, j).
fn oracle_spatial(desc: &Tensor, t: usize) -> Tensor {
    let s = desc.shape();
    let (tl, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[(tl - 1) * h * w, h, w]);
    let mut slot = 0;
    for k in 0..tl {
        if k == t {
            continue;
        }
        for hh in 0..h {
            for ww in 0..w {
                for i in 0..h {
                    for j in 0..w {
                        let p: Vec<f64> = (0..c).map(|ch| desc.get(&[t, ch, i, j])).collect();
                        let q: Vec<f64> = (0..c).map(|ch| desc.get(&[k, ch, hh, ww])).collect();
                        out.set(&[slot, i, j], oracle_ncc(&p, &q));
                    }
                }
                slot += 1;
            }
        }
    }
    out
}

fn oracle_channel(desc: &Tensor, t: usize) -> Tensor {
    let s = desc.shape();
    let (tl, c, h, w) = (s[0], s[1], s[2], s[3]);
    let chan = |f: usize, ch: usize| -> Vec<f64> {
        (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| desc.get(&[f, ch, i, j])).collect()
    };
    let mut out = Tensor::zeros(&[(tl - 1) * c, c, 1, 1]);
    let mut slot = 0;
    for k in 0..tl {
        if k == t {
            continue;
        }
        for cp in 0..c {
            for cc in 0..c {
                out.set(&[slot, cc, 0, 0], oracle_ncc(&chan(t, cc), &chan(k, cp)));
            }
            slot += 1;
        }
    }
    out
}

#[test]
fn ncc_examples() {
    let slack = 1e-4;
    assert!((ncc(&[1., 2., 3.], &[1., 2., 3.], NCC_EPS) - 1.0).abs() < slack);
    assert!((ncc(&[1., 2., 3.], &[2., 4., 6.], NCC_EPS) - 1.0).abs() < slack);
    assert!((ncc(&[1., 2., 3.], &[3., 2., 1.], NCC_EPS) + 1.0).abs() < slack);
    assert_eq!(ncc(&[4., 4., 4.], &[1., 2., 3.], NCC_EPS), 0.0);
}

#[test]
fn spatial_volume_shape_and_self_correlation() {
    let desc = Tensor::uniform(&[3, 5, 4, 2], -1.0, 1.0, &mut rng(1));
    let v = build_spatial_volume(&desc, 1).unwrap().unwrap();
    assert_eq!(v.shape(), &[16, 4, 2]);

    // Identical frames: slot (k, i, j) compared to position (i, j) is 1.
    let frame = Tensor::uniform(&[1, 5, 4, 2], -1.0, 1.0, &mut rng(2));
    let same = Tensor::from_fn(&[3, 5, 4, 2], |i| frame.data()[i % 40]);
    for t in 0..3 {
        let v = build_spatial_volume(&same, t).unwrap().unwrap();
        for slot_frame in 0..2 {
            for i in 0..4 {
                for j in 0..2 {
                    let slot = slot_frame * 8 + i * 2 + j;
                    assert!((v.get(&[slot, i, j]) - 1.0).abs() < 1e-4);
                }
            }
        }
    }
}

#[test]
fn spatial_volume_matches_quadruple_loop() {
    let desc = Tensor::uniform(&[2, 4, 2, 2], -1.0, 1.0, &mut rng(3));
    for t in 0..2 {
        let v = build_spatial_volume(&desc, t).unwrap().unwrap();
        assert!(v.max_abs_diff(&oracle_spatial(&desc, t)) <= 1e-10);
    }
    let mut r = rng(4);
    for (tl, c, h, w) in [(3, 8, 4, 4), (3, 2, 1, 3), (2, 7, 3, 1), (3, 3, 2, 4)] {
        let desc = Tensor::uniform(&[tl, c, h, w], -2.0, 2.0, &mut r);
        for t in 0..tl {
            let v = build_spatial_volume(&desc, t).unwrap().unwrap();
            assert!(v.max_abs_diff(&oracle_spatial(&desc, t)) <= 1e-10);
        }
    }
}

#[test]
fn channel_volume_shape_oracle_and_self_correlation() {
    let desc = Tensor::uniform(&[3, 8, 2, 2], -1.0, 1.0, &mut rng(5));
    let v = build_channel_volume(&desc, 0).unwrap().unwrap();
    assert_eq!(v.shape(), &[16, 8, 1, 1]);
    for t in 0..3 {
        let v = build_channel_volume(&desc, t).unwrap().unwrap();
        assert!(v.max_abs_diff(&oracle_channel(&desc, t)) <= 1e-10);
    }

    let frame = Tensor::uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut rng(6));
    let same = Tensor::from_fn(&[3, 4, 2, 2], |i| frame.data()[i % 16]);
    let v = build_channel_volume(&same, 2).unwrap().unwrap();
    for slot_frame in 0..2 {
        for c in 0..4 {
            assert!((v.get(&[slot_frame * 4 + c, c, 0, 0]) - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn single_frame_clip_has_no_volume() {
    let desc = Tensor::uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut rng(7));
    assert!(build_spatial_volume(&desc, 0).unwrap().is_none());
    assert!(build_channel_volume(&desc, 0).unwrap().is_none());
    assert!(build_spatial_volume(&desc, 1).is_err());
}

#[test]
fn spatial_volume_invariant_to_affine_frame_change() {
    let mut r = rng(8);
    let desc = Tensor::randn(&[3, 6, 3, 2], &mut r);
    let mut shifted = desc.clone();
    let (a, b) = (3.7, -1.2);
    for v in &mut shifted.data_mut()[36..72] {
        *v = a * *v + b;
    }
    for t in 0..3 {
        let v0 = build_spatial_volume(&desc, t).unwrap().unwrap();
        let v1 = build_spatial_volume(&shifted, t).unwrap().unwrap();
        assert!(v0.max_abs_diff(&v1) < 1e-3);
    }
}

fn desk_csl(store: &mut ParamStore, c: usize, c_l: usize, t: usize, h: usize, w: usize, seed: u64) -> Csl {
    let cfg = CslConfig {
        c_in: c,
        c_l,
        h_l: (h / 2).max(1),
        w_l: (w / 2).max(2.min(w)),
        ncc_eps: NCC_EPS,
    };
    Csl::new(store, "csl", cfg, t, h, w, &mut rng(seed)).unwrap()
}

#[test]
fn reduce_dims_shape_contract_at_paper_scale() {
    let mut store = ParamStore::new();
    let cfg = CslConfig {
        c_in: 256,
        c_l: 256,
        h_l: 16,
        w_l: 8,
        ncc_eps: NCC_EPS,
    };
    let csl = Csl::new(&mut store, "csl", cfg, 8, 32, 16, &mut rng(9)).unwrap();
    let g = Graph::new();
    let p = store.bind(&g, Mode::Eval);
    let f = g.constant(Tensor::uniform(&[8, 256, 32, 16], -1.0, 1.0, &mut rng(10)));
    let (s, c) = csl.reduce_dims(&p, f).unwrap();
    assert_eq!(s.shape(), vec![8, 256, 32, 16]);
    assert_eq!(c.shape(), vec![8, 256, 16, 8]);
}

#[test]
fn reduce_dims_single_frame_and_zero_input() {
    let mut store = ParamStore::new();
    let csl = desk_csl(&mut store, 8, 4, 1, 4, 4, 11);
    let g = Graph::new();
    let p = store.bind(&g, Mode::Train);
    let (s, c) = csl.reduce_dims(&p, g.constant(Tensor::uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut rng(12)))).unwrap();
    assert_eq!(s.shape(), vec![1, 4, 4, 4]);
    assert_eq!(c.shape(), vec![1, 8, 2, 2]);

    let (s, c) = csl.reduce_dims(&p, g.constant(Tensor::zeros(&[2, 8, 4, 4]))).unwrap();
    assert!(s.value().data().iter().all(|&v| v == 0.0));
    assert!(c.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn oversized_reduction_is_a_config_error() {
    let mut store = ParamStore::new();
    let cfg = CslConfig {
        c_in: 8,
        c_l: 4,
        h_l: 5,
        w_l: 2,
        ncc_eps: NCC_EPS,
    };
    let err = Csl::new(&mut store, "csl", cfg, 2, 4, 4, &mut rng(13)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn zero_summaries_give_half_gate_and_uniform_gate_halves_input() {
    let mut store = ParamStore::new();
    let csl = desk_csl(&mut store, 8, 4, 3, 4, 4, 14);
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for n in names.iter().filter(|n| n.contains("summary")) {
        let id = store.find(n).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let g = Graph::new();
    let p = store.bind(&g, Mode::Train);
    let f = Tensor::uniform(&[6, 8, 4, 4], -1.0, 1.0, &mut rng(15));
    let (out, att) = csl.forward(&p, g.constant(f.clone())).unwrap();
    assert!(att.z.value().data().iter().all(|&v| v == 0.5));
    for (o, x) in out.value().data().iter().zip(f.data()) {
        assert_eq!(*o, 0.5 * x);
    }
}

#[test]
fn single_frame_module_uses_neutral_gate() {
    let mut store = ParamStore::new();
    let csl = desk_csl(&mut store, 8, 4, 1, 4, 4, 16);
    let g = Graph::new();
    let p = store.bind(&g, Mode::Train);
    let (_, att) = csl.forward(&p, g.constant(Tensor::uniform(&[3, 8, 4, 4], -1.0, 1.0, &mut rng(17)))).unwrap();
    assert!(att.z.value().data().iter().all(|&v| v == 0.5));
}

#[test]
fn attention_is_strictly_inside_unit_interval() {
    let mut store = ParamStore::new();
    let csl = desk_csl(&mut store, 8, 4, 3, 4, 4, 18);
    let g = Graph::new();
    let p = store.bind(&g, Mode::Train);
    let (_, att) = csl.forward(&p, g.constant(Tensor::randn(&[6, 8, 4, 4], &mut rng(19)).clone())).unwrap();
    assert_eq!(att.z_s.shape(), vec![6, 1, 4, 4]);
    assert_eq!(att.z_c.shape(), vec![6, 8, 1, 1]);
    assert!(att.z.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn gating_suppresses_low_attention_positions() {
    let g = Graph::new();
    let f = Tensor::uniform(&[1, 2, 2, 2], 1.0, 2.0, &mut rng(20));
    let z_s = g.constant(Tensor::new(&[1, 1, 2, 2], vec![-6.0, 6.0, -6.0, 6.0]).unwrap());
    let z_c = g.constant(Tensor::ones(&[1, 2, 1, 1]));
    let z = z_s.mul(z_c).unwrap().sigmoid();
    let att = CoSaliencyAttention { z_s, z_c, z };
    let out = apply_cosaliency(g.constant(f.clone()), &att).unwrap().value();
    for i in 0..f.len() {
        if z.value().data()[i] < 0.1 {
            assert!(out.data()[i].abs() < 0.1 * f.data()[i].abs());
        }
    }
    let saturated = g.constant(Tensor::full(&[1, 2, 2, 2], 40.0)).sigmoid();
    let att = CoSaliencyAttention { z_s, z_c, z: saturated };
    let out = apply_cosaliency(g.constant(f.clone()), &att).unwrap().value();
    assert!(out.max_abs_diff(&f) < 1e-12);

    let wrong = g.constant(Tensor::ones(&[1, 3, 2, 2]));
    assert!(matches!(apply_cosaliency(wrong, &att), Err(Error::Dimension(_))));
}

/// Finite-difference check of the whole module on T=3, C=8, H=W=4, C_L=4,
/// H_L=W_L=2, over the input and every parameter.
#[test]
fn full_module_gradient_check() {
    let mut store = ParamStore::new();
    let cfg = CslConfig {
        c_in: 8,
        c_l: 4,
        h_l: 2,
        w_l: 2,
        ncc_eps: NCC_EPS,
    };
    let csl = Csl::new(&mut store, "csl", cfg, 3, 4, 4, &mut rng(21)).unwrap();
    let mut inputs = vec![Tensor::randn(&[3, 8, 4, 4], &mut rng(22))];
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    let rep = check_gradients(
        &inputs,
        |_, v| {
            let p = store.bind_vars(v[1..].to_vec(), Mode::Train);
            let (out, _) = csl.forward(&p, v[0])?;
            random_projection(out, 23)
        },
        1e-5,
        Some(24),
        24,
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn summarize_attention_gradient_check() {
    let mut store = ParamStore::new();
    let csl = desk_csl(&mut store, 4, 2, 2, 2, 2, 25);
    let sv = Tensor::uniform(&[2, 4, 2, 2], -1.0, 1.0, &mut rng(26));
    let cv = Tensor::uniform(&[2, 4, 4, 1], -1.0, 1.0, &mut rng(27));
    let mut inputs = vec![sv, cv];
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    let rep = check_gradients(
        &inputs,
        |_, v| {
            let p = store.bind_vars(v[2..].to_vec(), Mode::Train);
            let att = csl.summarize_attention(&p, Some(v[0]), Some(v[1]), 2)?;
            random_projection(att.z, 28)
        },
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

proptest! {
    #[test]
    fn ncc_is_symmetric_and_bounded(
        p in proptest::collection::vec(-5.0f64..5.0, 2..20),
        seed in 0u64..10_000,
        constant in proptest::bool::ANY,
    ) {
        let mut r = rng(seed);
        let q: Vec<f64> = if constant {
            vec![1.5; p.len()]
        } else {
            Tensor::uniform(&[p.len()], -5.0, 5.0, &mut r).into_data()
        };
        prop_assert_eq!(ncc(&p, &q, NCC_EPS), ncc(&q, &p, NCC_EPS));
        prop_assert!(ncc(&p, &q, NCC_EPS).abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn ncc_is_affine_invariant(a in 0.1f64..10.0, b in -5.0f64..5.0, seed in 0u64..10_000) {
        let p = Tensor::randn(&[16], &mut rng(seed)).into_data();
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        prop_assert!((ncc(&p, &q, NCC_EPS) - 1.0).abs() <= 1e-3);
    }
}
