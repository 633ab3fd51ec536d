//! Runs the spatial-temporal interaction block on a random clip and
//! inspects its relation maps and fusion gates.
//!
//! Run with `cargo run --example sti_attention`.

use cstnet::nn::{Mode, ParamStore};
use cstnet::sti::{Sti, StiConfig};
use cstnet::{Graph, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, c, h, w) = (4, 16, 8, 4);
    let cfg = StiConfig { c_in: c, c_1: 8, h_1: 4, w_1: 2 };
    let mut store = ParamStore::new();
    let sti = Sti::new(&mut store, "sti", cfg, t, h, w, &mut rng)?;

    let g = Graph::new();
    let p = store.bind(&g, Mode::Eval);
    let x = g.constant(Tensor::randn(&[t, c, h, w], &mut rng));
    let rel = sti.relations(&p, x)?;
    println!("spatial relation map  {:?}", rel.m_s.shape());
    println!("temporal relation map {:?}", rel.m_t.shape());

    // the temporal map of the first position: column j is the attention of
    // query frame j over the key frames
    let m_t = rel.m_t.value();
    for k in 0..t {
        let row: Vec<String> = (0..t).map(|j| format!("{:.3}", m_t.get(&[0, k, j]))).collect();
        println!("  key frame {k}: {}", row.join(" "));
    }

    let (fused, gates) = sti.fuse_relations(&p, rel.f_s, rel.f_t)?;
    println!("fused {:?}, a_s[0..4] {:?}", fused.shape(), &gates.a_s.value().data()[..4]);
    let y = sti.forward(&p, x)?;
    println!("residual output deviates from the input by at most {:.4}", y.value().max_abs_diff(&x.value()));
    Ok(())
}
