//! Saves a model to the binary checkpoint format, loads it back, and checks
//! that the restored network embeds clips identically.
//!
//! Run with `cargo run --example checkpoint_roundtrip`.

use cstnet::checkpoint::Checkpoint;
use cstnet::data::{generate_synthetic, Split, SynthSpec};
use cstnet::eval::split_clips;
use cstnet::model::{Cstnet, CstnetConfig};

fn main() -> cstnet::Result<()> {
    let data = generate_synthetic(&SynthSpec::clean(4, 1))?;
    let net = Cstnet::new(CstnetConfig::desk(4), 42)?;
    let path = std::env::temp_dir().join("cstnet-example.ck");
    Checkpoint::from_model(&net, 0, 42).save(&path)?;
    let bytes = std::fs::metadata(&path).expect("checkpoint written").len();

    let loaded = Checkpoint::load(&path)?;
    println!(
        "{} tensors, {bytes} bytes, epoch {}, seed {}",
        loaded.tensors.len(),
        loaded.meta.epoch,
        loaded.meta.seed
    );
    for (name, t) in loaded.tensors.iter().take(4) {
        println!("  {name} {:?}", t.shape());
    }
    let restored = loaded.into_model()?;

    let (clips, _, _) = split_clips(&data, Split::Query, net.cfg.clip_len)?;
    let a = net.embed(&clips, 8)?;
    let b = restored.embed(&clips, 8)?;
    println!("embeddings {:?}, max difference {}", a.shape(), a.max_abs_diff(&b));
    Ok(())
}
