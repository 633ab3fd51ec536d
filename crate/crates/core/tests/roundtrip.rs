use cstnet::checkpoint::Checkpoint;
use cstnet::config::RunConfig;
use cstnet::data::{generate_synthetic, load_dataset, save_dataset, Split, SynthSpec};
use cstnet::eval::{evaluate, split_clips};
use cstnet::format::{read_tensor_file, write_tensor_file, DType};
use cstnet::model::{Ablation, Cstnet, CstnetConfig};
use cstnet::training::{TrainConfig, Trainer};
use cstnet::Tensor;
use proptest::prelude::*;

fn tiny_spec() -> SynthSpec {
    SynthSpec {
        height: 16,
        width: 8,
        ..SynthSpec::clean(4, 21)
    }
}

#[test]
fn dataset_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SynthSpec::clean(6, 3)).unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    assert_eq!(back.census(), data.census());
}

#[test]
fn trained_model_survives_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&tiny_spec()).unwrap();
    let net = Cstnet::new(CstnetConfig::micro(4), 9).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        p: 2,
        k: 2,
        batches_per_epoch: Some(2),
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(net, &data, cfg, 9).unwrap();
    trainer.train_epoch(&data, |_| {}).unwrap();

    let path = dir.path().join("m.ck");
    let ck = Checkpoint::from_model(&trainer.net, trainer.epoch, 9);
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.meta.epoch, 1);

    let restored = loaded.into_model().unwrap();
    let (clips, _, _) = split_clips(&data, Split::Query, restored.cfg.clip_len).unwrap();
    let a = trainer.net.embed(&clips, 4).unwrap();
    let b = restored.embed(&clips, 4).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(evaluate(&trainer.net, &data, 5).unwrap(), evaluate(&restored, &data, 5).unwrap());
}

#[test]
fn ablated_models_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for ablation in [Ablation::Base, Ablation::Csl, Ablation::Sti, Ablation::Full] {
        let net = Cstnet::new(CstnetConfig::micro(3).with_ablation(ablation), 2).unwrap();
        let path = dir.path().join(format!("{ablation}.ck"));
        Checkpoint::from_model(&net, 0, 2).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(back.cfg, net.cfg);
        assert_eq!(back.census(), net.census());
    }
}

#[test]
fn resolved_config_round_trips() {
    let mut cfg = RunConfig::default();
    cfg.seed = 77;
    cfg.train.epochs = 3;
    cfg.synth = SynthSpec::clutter();
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tensor_files_round_trip(
        shape in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
        f32_only in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(-1e3..1e3);
                if f32_only { v as f32 as f64 } else { v }
            })
            .collect();
        let t = Tensor::new(&shape, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cstt");
        let dtype = if f32_only { DType::F32 } else { DType::F64 };
        write_tensor_file(&path, &t, dtype).unwrap();
        let (back_dtype, back) = read_tensor_file(&path).unwrap();
        prop_assert_eq!(back_dtype, dtype);
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
    }
}
