//! Builds a small expression on the autodiff tape, reads its gradients, and
//! compares them against central finite differences.
//!
//! Run with `cargo run --example autodiff_gradcheck`.

use cstnet::tensor::check_gradients;
use cstnet::{Graph, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[3, 4], &mut rng);
    let w = Tensor::randn(&[4, 2], &mut rng);

    let g = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.param(w.clone());
    let ramp = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0));
    // sum(ramp ⊙ softmax(sigmoid(x) · w))
    let y = xv.sigmoid().matmul(wv)?.softmax(1)?.mul(ramp)?.sum();
    y.backward()?;
    println!("loss          {:.6}", y.value().item());
    println!("dloss/dw      {:?}", wv.grad().unwrap().data());

    let report = check_gradients(
        &[x, w],
        |g, v| {
            let ramp = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0));
            Ok(v[0].sigmoid().matmul(v[1])?.softmax(1)?.mul(ramp)?.sum())
        },
        1e-5,
        None,
        1,
    )?;
    println!(
        "finite differences: {} coordinates, max relative error {:.2e}, passes 1e-4: {}",
        report.coordinates,
        report.max_rel_error,
        report.passes(1e-4)
    );
    Ok(())
}
