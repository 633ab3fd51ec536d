//! CMC and mAP on a hand-written distance matrix, including the rule that
//! same-camera matches of the query identity are ignored.
//!
//! Run with `cargo run --example ranking_metrics`.

use cstnet::metrics::{rank_metrics, Side};
use cstnet::Tensor;

fn main() -> cstnet::Result<()> {
    // 3 queries (ids 0, 1, 2 seen by camera 0) against 5 gallery entries
    let q_ids = [0, 1, 2];
    let q_cams = [0, 0, 0];
    let g_ids = [0, 1, 0, 2, 1];
    let g_cams = [1, 1, 0, 1, 1];
    #[rustfmt::skip]
    let dist = Tensor::new(&[3, 5], vec![
        0.9, 0.2, 0.1, 0.8, 0.5, // id 0: the nearest match is same-camera and skipped
        0.3, 0.4, 0.6, 0.7, 0.1, // id 1: true matches at ranks 1 and 3
        0.5, 0.4, 0.3, 0.2, 0.6, // id 2: top hit
    ])?;
    let m = rank_metrics(&dist, Side::new(&q_ids, &q_cams), Side::new(&g_ids, &g_cams), 4)?;
    println!("CMC {:?}", m.cmc);
    println!("per-query AP {:?}", m.per_query_ap);
    print!("{}", m.table());
    Ok(())
}
