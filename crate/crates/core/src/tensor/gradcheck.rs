use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub coordinates: usize,
    /// Probes excluded because `x ± h` crossed a ReLU kink.
    pub kink_skips: usize,
    /// (input index, flat element) of the worst coordinate.
    pub worst: (usize, usize),
}

/// Largest share of probes that may be excluded as kink crossings.
pub const MAX_KINK_SHARE: f64 = 0.1;

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        let probes = self.coordinates + self.kink_skips;
        self.max_rel_error <= tol && (self.kink_skips as f64) <= MAX_KINK_SHARE * probes as f64
    }
}

/// Compares analytic gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` is rebuilt on a fresh graph for every evaluation. A probe whose
/// perturbed evaluations change the sign of any ReLU input straddles a point
/// where the function is not differentiable; it is counted in `kink_skips`
/// instead of compared. When
/// `max_coords_per_input` is set, each input is probed at that many randomly
/// chosen elements instead of all of them.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    max_coords_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    loss.backward()?;
    let pattern = graph.relu_pattern();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.value().shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<(f64, bool)> {
        let g = Graph::new();
        let vs: Vec<Var<'_>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vs)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::contract("gradient check needs a scalar function"));
        }
        Ok((v.item(), g.relu_pattern() == pattern))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        kink_skips: 0,
        worst: (0, 0),
    };
    for (which, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match max_coords_per_input {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + h;
            let (up, same_up) = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let (down, same_down) = eval(&work)?;
            work[which].data_mut()[i] = orig;
            if !(same_up && same_down) {
                report.kink_skips += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = rel_error(analytic[which].data()[i], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, i);
            }
        }
    }
    Ok(report)
}

/// `Σ v ⊙ R` for a fixed pseudo-random `R`; turns any tensor-valued
/// function into a scalar without symmetric cancellation.
pub fn random_projection<'g>(v: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = v.shape();
    let r = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    Ok(v.mul(v.graph().constant(r))?.sum())
}
