//! Runs the property suite behind `cstnet verify`: finite-difference
//! gradient checks, NCC properties, loop oracles, structural invariants and
//! ranking-metric oracles.
//!
//! Run with `cargo run --release --example verify_suite [gradients]`.

use cstnet::verify::{run_suite, Suite};

fn main() {
    let suite = match std::env::args().nth(1).as_deref() {
        Some("gradients") => Suite::Gradients,
        _ => Suite::All,
    };
    let report = run_suite(suite, |r| println!("{}", r.line()));
    let failures = report.failures().count();
    println!("{}", report.render().lines().last().unwrap_or_default());
    std::process::exit(if failures == 0 { 0 } else { 2 });
}
