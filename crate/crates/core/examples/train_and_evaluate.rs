//! Trains the desk-scale network on the learnability preset and reports
//! CMC and mAP as training progresses.
//!
//! Run with `cargo run --release --example train_and_evaluate [epochs] [ablation]`.
//! `ablation` is one of `base`, `csl`, `sti`, `full` (default).

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use cstnet::data::{generate_synthetic, SynthSpec};
use cstnet::eval::evaluate;
use cstnet::model::{Ablation, Cstnet, CstnetConfig};
use cstnet::training::{TrainConfig, Trainer};

fn main() -> cstnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(20, |s| s.parse().expect("epochs"));
    let ablation: Ablation = args.next().map_or(Ok(Ablation::Full), |s| s.parse())?;

    let spec = SynthSpec::learnability();
    let data = generate_synthetic(&spec)?;
    let net = Cstnet::new(CstnetConfig::desk(spec.num_identities).with_ablation(ablation), 0)?;
    println!("{ablation} model, {} parameters", net.census().total());

    let cfg = TrainConfig { epochs, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(net, &data, cfg, 0)?;
    println!("{} batches per epoch", trainer.batches_per_epoch());
    for epoch in 1..=epochs {
        let report = trainer.train_epoch(&data, |_| {})?;
        let s = &report.summary;
        if epoch % 5 == 0 || epoch == epochs {
            let m = evaluate(&trainer.net, &data, 20)?;
            println!(
                "epoch {epoch:>3}  loss {:.3} (triplet {:.3}, id {:.3})  rank-1 {:.3}  mAP {:.3}",
                s.total_loss, s.triplet_loss, s.id_loss, m.rank(1), m.map
            );
        }
    }
    print!("{}", evaluate(&trainer.net, &data, 20)?.table());
    Ok(())
}
