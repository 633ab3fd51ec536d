use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{check_gradients, random_projection};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn clips(cfg: &CstnetConfig, n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, cfg.clip_len, cfg.in_channels, cfg.height, cfg.width], &mut rng(seed))
}

/// Parameter count written out from the layer formulas.
fn expected_census(cfg: &CstnetConfig) -> (usize, usize) {
    let mut trainable = 0;
    let mut buffers = 0;
    let mut bn = |c: usize, trainable: &mut usize| {
        *trainable += 2 * c;
        buffers += 2 * c;
    };
    let extents = cfg.stage_extents();
    let mut c_in = cfg.in_channels;
    for i in 0..5 {
        let (c, s) = (cfg.stage_channels[i], cfg.stage_strides[i]);
        trainable += 9 * c_in * c + 9 * c * c;
        bn(c, &mut trainable);
        bn(c, &mut trainable);
        if c_in != c || s != 1 {
            trainable += c_in * c;
            bn(c, &mut trainable);
        }
        if let Some(ins) = cfg.insertions.iter().find(|x| x.stage == i + 1) {
            let (h, w) = extents[i];
            let t = cfg.clip_len;
            if let Some(csl) = &ins.csl {
                trainable += c * csl.c_l + c * c;
                bn(csl.c_l, &mut trainable);
                bn(c, &mut trainable);
                if t >= 2 {
                    trainable += (t - 1) * h * w + 1 + (t - 1) * c + 1;
                }
            }
            if let Some(sti) = &ins.sti {
                let c1 = sti.c_1;
                trainable += 4 * (c * c1 + c1) + 2 * (c1 * c + c) + 2 * (c * c + c);
            }
        }
        c_in = c;
    }
    let e = cfg.embedding_dim;
    trainable += c_in * e + e + e * cfg.num_identities + cfg.num_identities;
    (trainable, buffers)
}

#[test]
fn desk_embedding_shapes() {
    let cfg = CstnetConfig::desk(16);
    let net = Cstnet::new(cfg.clone(), 1).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let g = Graph::new();
        let p = net.store.bind(&g, mode);
        let emb = net.forward(&p, g.constant(clips(&cfg, 2, 2))).unwrap();
        assert_eq!(emb.feature.shape(), vec![2, 64]);
        assert_eq!(emb.logits.shape(), vec![2, 16]);
        assert_eq!(emb.attention.len(), 3);
    }
}

#[test]
fn desk_stage_layout() {
    let cfg = CstnetConfig::desk(16);
    assert_eq!(cfg.stage_extents(), vec![(32, 16), (16, 8), (8, 4), (4, 2), (4, 2)]);
    assert_eq!(cfg.insertion_points(), vec![2, 3, 4]);
    for ins in &cfg.insertions {
        let sti = ins.sti.as_ref().unwrap();
        assert_eq!((sti.c_1, sti.h_1, sti.w_1), (16, 4, 2));
        assert_eq!(ins.csl.as_ref().unwrap().c_l, 16);
    }
    cfg.validate().unwrap();
    CstnetConfig::micro(4).validate().unwrap();
    CstnetConfig::paper(625).validate().unwrap();
}

#[test]
fn paper_preset_module_sizes() {
    let cfg = CstnetConfig::paper(625);
    let first = &cfg.insertions[0];
    let csl = first.csl.as_ref().unwrap();
    let sti = first.sti.as_ref().unwrap();
    assert_eq!((csl.c_l, sti.c_1, sti.h_1, sti.w_1), (256, 128, 16, 8));
    assert_eq!(cfg.clip_len, 8);
}

#[test]
fn stride_two_stage_halves_extent_with_ceiling() {
    let mut store = ParamStore::new();
    let stage = ResidualStage::new(&mut store, "s", 3, 4, 2, &mut rng(3));
    let g = Graph::new();
    let p = store.bind(&g, Mode::Train);
    let y = stage.forward(&p, g.constant(Tensor::randn(&[2, 3, 5, 3], &mut rng(4)))).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 3, 2]);
}

#[test]
fn stage_with_zero_second_conv_is_relu_of_shortcut() {
    for (c_in, c_out, stride) in [(3, 4, 2), (4, 4, 1)] {
        let mut store = ParamStore::new();
        let stage = ResidualStage::new(&mut store, "s", c_in, c_out, stride, &mut rng(5));
        let id = store.find("s.conv2.weight").unwrap();
        store.get_mut(id).data_mut().fill(0.0);
        let x = Tensor::randn(&[2, c_in, 4, 4], &mut rng(6));
        for mode in [Mode::Train, Mode::Eval] {
            let g = Graph::new();
            let p = store.bind(&g, mode);
            let xv = g.constant(x.clone());
            let y = stage.forward(&p, xv).unwrap();
            let short = match &stage.shortcut {
                Some((conv, bn)) => bn.forward(&p, conv.forward(&p, xv).unwrap()).unwrap(),
                None => xv,
            };
            assert!(y.value().max_abs_diff(&short.relu().value()) < 1e-12);
        }
    }
}

#[test]
fn stage_channel_mismatch_is_config_error() {
    let mut store = ParamStore::new();
    let stage = ResidualStage::new(&mut store, "s", 3, 4, 1, &mut rng(7));
    let g = Graph::new();
    let p = store.bind(&g, Mode::Train);
    let err = stage.forward(&p, g.constant(Tensor::zeros(&[1, 2, 4, 4]))).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn single_stage_gradient_check() {
    let mut store = ParamStore::new();
    let stage = ResidualStage::new(&mut store, "s", 2, 3, 2, &mut rng(8));
    let mut inputs = vec![Tensor::randn(&[2, 2, 4, 4], &mut rng(9))];
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    let rep = check_gradients(
        &inputs,
        |_, v| {
            let p = store.bind_vars(v[1..].to_vec(), Mode::Train);
            random_projection(stage.forward(&p, v[0])?, 10)
        },
        1e-5,
        Some(16),
        11,
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn micro_model_gradient_check() {
    let cfg = CstnetConfig::micro(4);
    let net = Cstnet::new(cfg.clone(), 12).unwrap();
    let mut inputs = vec![clips(&cfg, 2, 13)];
    inputs.extend(net.store.entries().iter().map(|e| e.value.clone()));
    let rep = check_gradients(
        &inputs,
        |_, v| {
            let p = net.store.bind_vars(v[1..].to_vec(), Mode::Train);
            let emb = net.forward(&p, v[0])?;
            random_projection(emb.feature, 14)?.add(random_projection(emb.logits, 15)?)
        },
        1e-5,
        Some(4),
        16,
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
    assert!(rep.coordinates > 500);
}

#[test]
fn eval_forward_is_pure_and_chunk_invariant() {
    let cfg = CstnetConfig::micro(4);
    let net = Cstnet::new(cfg.clone(), 17).unwrap();
    let x = clips(&cfg, 5, 18);
    let a = net.embed(&x, 5).unwrap();
    let b = net.embed(&x, 5).unwrap();
    let c = net.embed(&x, 2).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data(), c.data());
}

#[test]
fn identical_clips_embed_identically() {
    let cfg = CstnetConfig::micro(4);
    let net = Cstnet::new(cfg.clone(), 19).unwrap();
    let one = clips(&cfg, 1, 20);
    let two = Tensor::from_fn(&[2, 2, 3, 16, 8], |i| one.data()[i % one.len()]);
    let e = net.embed(&two, 2).unwrap();
    assert_eq!(e.data()[..8], e.data()[8..]);
}

#[test]
fn wrong_clip_shape_is_contract_error() {
    let cfg = CstnetConfig::micro(4);
    let net = Cstnet::new(cfg, 21).unwrap();
    for shape in [vec![1, 3, 3, 16, 8], vec![1, 2, 3, 8, 8], vec![2, 3, 16, 8]] {
        let err = net.embed(&Tensor::zeros(&shape), 4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{shape:?}");
    }
}

#[test]
fn features_stay_finite_over_many_random_clips() {
    let cfg = CstnetConfig::micro(4);
    let net = Cstnet::new(cfg.clone(), 22).unwrap();
    let mut r = rng(23);
    let x = Tensor::from_fn(&[1000, 2, 3, 16, 8], |_| r.gen_range(-50.0..50.0));
    assert!(net.embed(&x, 100).unwrap().all_finite());
}

#[test]
fn census_matches_layer_formulas() {
    for cfg in [
        CstnetConfig::desk(16),
        CstnetConfig::micro(4),
        CstnetConfig::desk(16).with_ablation(Ablation::Csl),
        CstnetConfig::desk(16).with_ablation(Ablation::Sti),
    ] {
        let net = Cstnet::new(cfg.clone(), 24).unwrap();
        let c = net.census();
        assert_eq!((c.trainable, c.buffers), expected_census(&cfg));
        assert_eq!(c.total(), c.backbone + c.csl + c.sti + c.head);
        assert_eq!(net.store.trainable_count(), c.trainable);
    }
}

#[test]
fn base_ablation_has_no_inserted_modules() {
    let cfg = CstnetConfig::desk(16).with_ablation(Ablation::Base);
    assert!(cfg.insertion_points().is_empty());
    let net = Cstnet::new(cfg, 25).unwrap();
    let c = net.census();
    assert_eq!((c.csl, c.sti), (0, 0));
    let full = Cstnet::new(CstnetConfig::desk(16), 25).unwrap().census();
    assert_eq!(full.backbone, c.backbone);
    assert!(full.csl > 0 && full.sti > 0);
}

#[test]
fn ablation_parses_and_displays() {
    for a in Ablation::ALL {
        assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
    }
    assert!(matches!("nope".parse::<Ablation>(), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = CstnetConfig::desk(16);
    cfg.insertions[0].stage = 6;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = CstnetConfig::desk(16);
    cfg.insertions[1].csl.as_mut().unwrap().c_in = 7;
    assert!(matches!(Cstnet::new(cfg, 0), Err(Error::Config(_))));
    let mut cfg = CstnetConfig::desk(16);
    cfg.embedding_dim = 0;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = CstnetConfig::desk(16);
    cfg.stage_channels.pop();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(matches!(CstnetConfig::preset("huge", 4), Err(Error::Config(_))));
}

#[test]
fn model_attention_gates_are_strictly_inside_unit_interval() {
    let cfg = CstnetConfig::micro(4);
    let net = Cstnet::new(cfg.clone(), 26).unwrap();
    let g = Graph::new();
    let p = net.store.bind(&g, Mode::Train);
    let emb = net.forward(&p, g.constant(clips(&cfg, 2, 27))).unwrap();
    for att in &emb.attention {
        assert!(att.z.value().data().iter().all(|&z| z > 0.0 && z < 1.0));
    }
}

#[test]
fn config_round_trips_through_json_and_toml() {
    let cfg = CstnetConfig::desk(16).with_ablation(Ablation::Csl);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<CstnetConfig>(&json).unwrap(), cfg);
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<CstnetConfig>(&text).unwrap(), cfg);
}

fn naive_distances(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..d {
                let diff = x.get(&[i, c]) - x.get(&[j, c]);
                s += diff * diff;
            }
            out.push(s.sqrt());
        }
    }
    out
}

#[test]
fn pairwise_distance_examples() {
    let same = Tensor::new(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
    assert!(pairwise_distances(&same).unwrap().data().iter().all(|&d| d == 0.0));
    let tri = Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
    assert_eq!(pairwise_distances(&tri).unwrap().get(&[0, 1]), 5.0);
    let x = Tensor::randn(&[5, 3], &mut rng(28));
    let d = pairwise_distances(&x).unwrap();
    let want = naive_distances(&x);
    for (a, b) in d.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10);
    }
    for i in 0..5 {
        assert_eq!(d.get(&[i, i]), 0.0);
        for j in 0..5 {
            assert!((d.get(&[i, j]) - d.get(&[j, i])).abs() <= 1e-9);
        }
    }
}

#[test]
fn distance_shape_mismatch_is_dimension_error() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 4]);
    assert!(matches!(cross_distances(&a, &b), Err(Error::Dimension(_))));
}
