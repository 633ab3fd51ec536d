//! Normalized cross-correlation, the correlation volumes built from it, and
//! the co-saliency gate of a freshly initialized module.
//!
//! Run with `cargo run --example ncc_cosaliency`.

use cstnet::csl::{build_channel_volume, build_spatial_volume, ncc, Csl, CslConfig};
use cstnet::nn::{Mode, ParamStore};
use cstnet::{Graph, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let p = [1.0, 2.0, 3.0, 5.0];
    let affine: Vec<f64> = p.iter().map(|v| 4.0 * v - 7.0).collect();
    let flipped: Vec<f64> = p.iter().rev().copied().collect();
    println!("ncc(p, p)        {:.6}", ncc(&p, &p, 1e-5));
    println!("ncc(p, 4p - 7)   {:.6}", ncc(&p, &affine, 1e-5));
    println!("ncc(p, reversed) {:.6}", ncc(&p, &flipped, 1e-5));
    println!("ncc(const, p)    {:.6}", ncc(&[2.0; 4], &p, 1e-5));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // T = 3 frames of C_L = 4 descriptors on a 4×2 grid
    let desc = Tensor::randn(&[3, 4, 4, 2], &mut rng);
    let sv = build_spatial_volume(&desc, 0)?.unwrap();
    let cv = build_channel_volume(&desc, 0)?.unwrap();
    println!("spatial volume of frame 0: {:?}", sv.shape());
    println!("channel volume of frame 0: {:?}", cv.shape());

    let (t, c, h, w) = (4, 8, 8, 4);
    let cfg = CslConfig { c_in: c, c_l: 4, h_l: 2, w_l: 2, ncc_eps: 1e-5 };
    let mut store = ParamStore::new();
    let csl = Csl::new(&mut store, "csl", cfg, t, h, w, &mut rng)?;
    let g = Graph::new();
    let bound = store.bind(&g, Mode::Eval);
    let f = g.constant(Tensor::randn(&[t, c, h, w], &mut rng));
    let (gated, att) = csl.forward(&bound, f)?;
    let z = att.z.value();
    let (lo, hi) = z.data().iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("gate {:?} in [{lo:.4}, {hi:.4}], output {:?}", z.shape(), gated.shape());
    println!("{} learned parameters", store.trainable_count());
    Ok(())
}
