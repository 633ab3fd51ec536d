//! Property suite behind the `verify` and `gradcheck` commands.
//!
//! Every property is a measured error against a tolerance. A property whose
//! setup itself fails is reported as failed with the error in its detail.

mod oracles;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::csl::{self, Csl, CslConfig, NCC_EPS};
use crate::error::Result;
use crate::metrics::{rank_metrics, Side};
use crate::model::{self, Cstnet, CstnetConfig, ResidualStage};
use crate::nn::{Bindings, Mode, ParamStore};
use crate::sti::{Sti, StiConfig};
use crate::tensor::{check_gradients, random_projection, Graph, Tensor, Var};
use crate::training::{adam_step, batch_hard_triplet, label_smooth_ce, total_loss, AdamConfig};

/// Largest relative error accepted from a finite-difference check.
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Gradient,
    Ncc,
    Oracle,
    Structure,
    Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub group: Group,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl PropertyResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<40} measured {:<10.3e} tol {:<8.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn max_gradient_error(&self) -> Option<f64> {
        self.results
            .iter()
            .filter(|r| r.group == Group::Gradient)
            .map(|r| r.measured)
            .reduce(f64::max)
    }

    pub fn find(&self, name: &str) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(s, "{}", r.line());
        }
        let failed = self.failures().count();
        let _ = write!(s, "{} properties, {} failed", self.results.len(), failed);
        if let Some(m) = self.max_gradient_error() {
            let _ = write!(s, ", max gradient-check relative error {m:.3e}");
        }
        s.push('\n');
        s
    }
}

/// Which part of the suite to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Finite-difference checks only.
    Gradients,
    All,
}

struct Outcome {
    measured: f64,
    tolerance: f64,
    passed: bool,
    detail: String,
}

/// `measured ≤ tolerance`; NaN fails.
fn within(measured: f64, tolerance: f64, detail: impl Into<String>) -> Outcome {
    Outcome {
        measured,
        tolerance,
        passed: measured <= tolerance,
        detail: detail.into(),
    }
}

struct Runner<'a> {
    results: Vec<PropertyResult>,
    on_result: &'a mut dyn FnMut(&PropertyResult),
}

impl Runner<'_> {
    fn run(&mut self, name: &str, group: Group, f: impl FnOnce() -> Result<Outcome>) {
        let r = match f() {
            Ok(o) => PropertyResult {
                name: name.into(),
                group,
                passed: o.passed,
                measured: o.measured,
                tolerance: o.tolerance,
                detail: o.detail,
            },
            Err(e) => PropertyResult {
                name: name.into(),
                group,
                passed: false,
                measured: f64::NAN,
                tolerance: f64::NAN,
                detail: format!("error: {e}"),
            },
        };
        (self.on_result)(&r);
        self.results.push(r);
    }
}

/// Runs the chosen suite, reporting each property as soon as it finishes.
pub fn run_suite(suite: Suite, mut on_result: impl FnMut(&PropertyResult)) -> VerifyReport {
    let mut runner = Runner {
        results: Vec::new(),
        on_result: &mut on_result,
    };
    gradient_checks(&mut runner);
    if suite == Suite::All {
        for r in ncc_properties(csl::ncc, 0) {
            (runner.on_result)(&r);
            runner.results.push(r);
        }
        oracle_checks(&mut runner);
        structure_checks(&mut runner);
        metric_checks(&mut runner);
    }
    VerifyReport { results: runner.results }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

fn grad_outcome(
    inputs: &[Tensor],
    coords: Option<usize>,
    seed: u64,
    f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
) -> Result<Outcome> {
    let rep = check_gradients(inputs, f, FD_STEP, coords, seed)?;
    Ok(Outcome {
        measured: rep.max_rel_error,
        tolerance: GRAD_TOL,
        passed: rep.passes(GRAD_TOL),
        detail: format!("{} coordinates, {} kink skips", rep.coordinates, rep.kink_skips),
    })
}

/// Gradient check of a tensor-valued op through a fixed random projection.
fn op_grad(
    r: &mut Runner<'_>,
    name: &str,
    inputs: Vec<Tensor>,
    seed: u64,
    f: impl for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>>,
) {
    r.run(name, Group::Gradient, || {
        grad_outcome(&inputs, None, seed, |_, v| random_projection(f(v)?, seed))
    });
}

/// Gradient check over `extra` inputs plus every entry of `store`.
fn module_grad(
    r: &mut Runner<'_>,
    name: &str,
    store: &ParamStore,
    extra: Vec<Tensor>,
    coords: Option<usize>,
    seed: u64,
    f: impl for<'g> Fn(&Bindings<'g, '_>, &[Var<'g>]) -> Result<Var<'g>>,
) {
    let n = extra.len();
    let mut inputs = extra;
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    r.run(name, Group::Gradient, || {
        grad_outcome(&inputs, coords, seed, |_, v| {
            let p = store.bind_vars(v[n..].to_vec(), Mode::Train);
            random_projection(f(&p, &v[..n])?, seed)
        })
    });
}

fn sti_module(t: usize, c: usize, h: usize, w: usize, cfg: (usize, usize, usize), seed: u64) -> Result<(ParamStore, Sti)> {
    let mut store = ParamStore::new();
    let cfg = StiConfig {
        c_in: c,
        c_1: cfg.0,
        h_1: cfg.1,
        w_1: cfg.2,
    };
    let sti = Sti::new(&mut store, "sti", cfg, t, h, w, &mut rng(seed))?;
    Ok((store, sti))
}

fn csl_module(t: usize, c: usize, c_l: usize, h: usize, w: usize, grid: (usize, usize), seed: u64) -> Result<(ParamStore, Csl)> {
    let mut store = ParamStore::new();
    let cfg = CslConfig {
        c_in: c,
        c_l,
        h_l: grid.0,
        w_l: grid.1,
        ncc_eps: NCC_EPS,
    };
    let csl = Csl::new(&mut store, "csl", cfg, t, h, w, &mut rng(seed))?;
    Ok((store, csl))
}

fn gradient_checks(r: &mut Runner<'_>) {
    op_grad(r, "grad add (broadcast)", vec![randn(&[3, 4], 1), randn(&[1, 4], 2)], 3, |v| v[0].add(v[1]));
    op_grad(r, "grad sub (broadcast)", vec![randn(&[3, 4], 4), randn(&[3, 1], 5)], 6, |v| v[0].sub(v[1]));
    op_grad(r, "grad mul (broadcast)", vec![randn(&[2, 3, 4], 7), randn(&[1, 3, 1], 8)], 9, |v| v[0].mul(v[1]));
    op_grad(r, "grad scale", vec![randn(&[5], 10)], 11, |v| Ok(v[0].scale(-2.5)));
    op_grad(r, "grad add_scalar", vec![randn(&[5], 12)], 13, |v| Ok(v[0].add_scalar(0.7)));
    op_grad(r, "grad sigmoid", vec![randn(&[2, 5], 14)], 15, |v| Ok(v[0].sigmoid()));
    op_grad(r, "grad relu", vec![randn(&[2, 5], 16)], 17, |v| Ok(v[0].relu()));
    op_grad(r, "grad reshape", vec![randn(&[2, 6], 18)], 19, |v| v[0].reshape(&[3, 4]));
    op_grad(r, "grad permute", vec![randn(&[2, 3, 4], 20)], 21, |v| v[0].permute(&[2, 0, 1]));
    op_grad(r, "grad transpose", vec![randn(&[3, 5], 22)], 23, |v| v[0].transpose());
    op_grad(r, "grad matmul", vec![randn(&[3, 4], 24), randn(&[4, 2], 25)], 26, |v| v[0].matmul(v[1]));
    op_grad(r, "grad matmul (batched)", vec![randn(&[2, 3, 4], 27), randn(&[2, 4, 2], 28)], 29, |v| {
        v[0].matmul(v[1])
    });
    op_grad(r, "grad softmax", vec![randn(&[3, 5], 30)], 31, |v| v[0].softmax(1));
    op_grad(r, "grad log_softmax", vec![randn(&[4, 3], 32)], 33, |v| v[0].log_softmax(0));
    op_grad(
        r,
        "grad conv2d (stride 1, pad 1)",
        vec![randn(&[2, 2, 4, 4], 34), randn(&[3, 2, 3, 3], 35), randn(&[3], 36)],
        37,
        |v| v[0].conv2d(v[1], Some(v[2]), 1, 1),
    );
    op_grad(
        r,
        "grad conv2d (stride 2, pad 1)",
        vec![randn(&[1, 2, 5, 5], 38), randn(&[2, 2, 3, 3], 39)],
        40,
        |v| v[0].conv2d(v[1], None, 2, 1),
    );
    op_grad(r, "grad adaptive_avg_pool2d", vec![randn(&[1, 2, 5, 3], 41)], 42, |v| {
        v[0].adaptive_avg_pool2d(2, 2)
    });
    op_grad(r, "grad sum", vec![randn(&[2, 3], 43)], 44, |v| Ok(v[0].sum()));
    op_grad(r, "grad mean", vec![randn(&[2, 3], 45)], 46, |v| Ok(v[0].mean()));
    op_grad(r, "grad sum_axes", vec![randn(&[2, 3, 4], 47)], 48, |v| v[0].sum_axes(&[0, 2], false));
    op_grad(r, "grad mean_axes", vec![randn(&[2, 3, 4], 49)], 50, |v| v[0].mean_axes(&[1], true));
    op_grad(
        r,
        "grad batch_norm (train)",
        vec![randn(&[3, 2, 2, 2], 51), randn(&[2], 52), randn(&[2], 53)],
        54,
        |v| Ok(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0),
    );
    op_grad(
        r,
        "grad batch_norm (eval)",
        vec![randn(&[3, 2, 2, 2], 55), randn(&[2], 56), randn(&[2], 57)],
        58,
        |v| v[0].batch_norm_eval(v[1], v[2], &[0.3, -0.2], &[1.5, 0.4], 1e-5),
    );
    op_grad(r, "grad gather", vec![randn(&[3, 4], 59)], 60, |v| v[0].gather(&[0, 5, 5, 11, 2]));
    op_grad(r, "grad pairwise_distances", vec![randn(&[5, 3], 61)], 62, |v| v[0].pairwise_distances());
    op_grad(r, "grad standardize", vec![randn(&[2, 4, 3], 63)], 64, |v| v[0].standardize(NCC_EPS));
    op_grad(r, "grad cross_frame_correlation", vec![randn(&[6, 3, 4], 65)], 66, |v| {
        v[0].cross_frame_correlation(3)
    });
    let weights = randn(&[4], 67);
    op_grad(
        r,
        "grad composite conv-relu-pool-matmul-softmax",
        vec![randn(&[1, 2, 5, 5], 68), randn(&[3, 2, 3, 3], 69), randn(&[12, 4], 70)],
        71,
        move |v| {
            let g = v[0].graph();
            let h = v[0].conv2d(v[1], None, 1, 1)?.relu().adaptive_avg_pool2d(2, 2)?;
            let s = h.reshape(&[1, 12])?.matmul(v[2])?.softmax(1)?;
            Ok(s.mul(g.constant(weights.reshape(&[1, 4])?))?.sum())
        },
    );

    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    op_grad(r, "grad batch-hard triplet loss", vec![randn(&[8, 4], 72)], 73, move |v| {
        batch_hard_triplet(v[0], &labels, 0.3)
    });
    op_grad(r, "grad label-smoothed cross-entropy", vec![randn(&[4, 5], 74)], 75, |v| {
        label_smooth_ce(v[0], &[0, 3, 1, 3], 0.1)
    });
    op_grad(r, "grad total loss", vec![randn(&[8, 4], 76), randn(&[8, 4], 77)], 78, move |v| {
        Ok(total_loss(v[0], v[1], &labels, 0.3, 0.1)?.total)
    });

    match csl_module(3, 8, 4, 4, 4, (2, 2), 80) {
        Ok((store, m)) => module_grad(r, "grad CSL forward", &store, vec![randn(&[3, 8, 4, 4], 81)], Some(24), 82, |p, v| {
            Ok(m.forward(p, v[0])?.0)
        }),
        Err(e) => r.run("grad CSL forward", Group::Gradient, || Err(e)),
    }
    match csl_module(2, 4, 2, 2, 2, (2, 1), 83) {
        Ok((store, m)) => module_grad(
            r,
            "grad CSL summarize_attention",
            &store,
            vec![Tensor::uniform(&[2, 4, 2, 2], -1.0, 1.0, &mut rng(84)), Tensor::uniform(&[2, 4, 4, 1], -1.0, 1.0, &mut rng(85))],
            None,
            86,
            |p, v| Ok(m.summarize_attention(p, Some(v[0]), Some(v[1]), 2)?.z),
        ),
        Err(e) => r.run("grad CSL summarize_attention", Group::Gradient, || Err(e)),
    }
    match sti_module(2, 8, 4, 4, (4, 2, 2), 87) {
        Ok((store, m)) => {
            module_grad(r, "grad STI spatial relation", &store, vec![randn(&[2, 8, 4, 4], 88)], Some(24), 89, |p, v| {
                Ok(m.spatial_relation(p, v[0])?.0)
            });
            module_grad(r, "grad STI forward (T=2, C=8, 4x4)", &store, vec![randn(&[2, 8, 4, 4], 90)], Some(24), 91, |p, v| {
                m.forward(p, v[0])
            });
        }
        Err(e) => r.run("grad STI", Group::Gradient, || Err(e)),
    }
    match sti_module(3, 6, 3, 2, (4, 2, 1), 92) {
        Ok((store, m)) => module_grad(r, "grad STI temporal relation", &store, vec![randn(&[6, 6, 3, 2], 93)], Some(24), 94, |p, v| {
            Ok(m.temporal_relation(p, v[0])?.0)
        }),
        Err(e) => r.run("grad STI temporal relation", Group::Gradient, || Err(e)),
    }
    match sti_module(2, 4, 2, 2, (2, 1, 1), 95) {
        Ok((store, m)) => module_grad(
            r,
            "grad STI fusion",
            &store,
            vec![randn(&[4, 4, 2, 2], 96), randn(&[4, 4, 2, 2], 97)],
            None,
            98,
            |p, v| Ok(m.fuse_relations(p, v[0], v[1])?.0),
        ),
        Err(e) => r.run("grad STI fusion", Group::Gradient, || Err(e)),
    }
    {
        let mut store = ParamStore::new();
        let stage = ResidualStage::new(&mut store, "s", 2, 3, 2, &mut rng(99));
        module_grad(r, "grad residual stage", &store, vec![randn(&[2, 2, 4, 4], 100)], Some(16), 101, |p, v| {
            stage.forward(p, v[0])
        });
    }
    let cfg = CstnetConfig::micro(4);
    match Cstnet::new(cfg.clone(), 12) {
        Ok(net) => {
            let clips = randn(&[2, cfg.clip_len, cfg.in_channels, cfg.height, cfg.width], 13);
            module_grad(r, "grad micro CSTNet", &net.store, vec![clips], Some(4), 102, |p, v| {
                let emb = net.forward(p, v[0])?;
                random_projection(emb.feature, 14)?.add(random_projection(emb.logits, 15)?)
            });
        }
        Err(e) => r.run("grad micro CSTNet", Group::Gradient, || Err(e)),
    }
}

pub type NccFn = fn(&[f64], &[f64], f64) -> f64;

/// Symmetry, affine invariance and bounds of an NCC implementation.
pub fn ncc_properties(ncc: NccFn, seed: u64) -> Vec<PropertyResult> {
    let mut r = rng(seed);
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for i in 0..1000 {
        let d = r.gen_range(2..=20);
        let mut p: Vec<f64> = (0..d).map(|_| r.gen_range(-5.0..5.0)).collect();
        let mut q: Vec<f64> = (0..d).map(|_| r.gen_range(-5.0..5.0)).collect();
        match i % 10 {
            0 => q = vec![1.5; d],
            1 => p = vec![-0.25; d],
            2 => {
                p = vec![3.0; d];
                q = vec![3.0; d];
            }
            3 => q = p.iter().map(|v| -2.0 * v + 1.0).collect(),
            4 => q = p.clone(),
            _ => {}
        }
        pairs.push((p, q));
    }
    let asym = pairs
        .iter()
        .map(|(p, q)| (ncc(p, q, NCC_EPS) - ncc(q, p, NCC_EPS)).abs())
        .fold(0.0, f64::max);
    let bound = pairs
        .iter()
        .map(|(p, q)| ncc(p, q, NCC_EPS).abs())
        .fold(0.0, f64::max);
    let mut affine = 0.0f64;
    for _ in 0..1000 {
        let d = r.gen_range(8..=32);
        let p = Tensor::randn(&[d], &mut r).into_data();
        let a = r.gen_range(0.1..=10.0);
        let b = r.gen_range(-5.0..=5.0);
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let e = (ncc(&p, &q, NCC_EPS) - 1.0).abs();
        affine = if e.is_nan() { f64::NAN } else { affine.max(e) };
    }
    let result = |name: &str, o: Outcome| PropertyResult {
        name: name.into(),
        group: Group::Ncc,
        passed: o.passed,
        measured: o.measured,
        tolerance: o.tolerance,
        detail: o.detail,
    };
    vec![
        result("ncc symmetry", within(asym, 0.0, "1000 pairs, exact")),
        result("ncc affine invariance", within(affine, 1e-3, "1000 descriptors, a in [0.1, 10], b in [-5, 5]")),
        result("ncc bound", within(bound - 1.0, 1e-3, "|ncc| - 1 over 1000 pairs incl. constant descriptors")),
    ]
}

fn oracle_checks(r: &mut Runner<'_>) {
    r.run("oracle matmul 3x3", Group::Oracle, || {
        let (a, b) = (randn(&[3, 3], 200), randn(&[3, 3], 201));
        let g = Graph::new();
        let out = g.constant(a.clone()).matmul(g.constant(b.clone()))?.value();
        Ok(within(max_diff(out.data(), &oracles::matmul(&a, &b)), 1e-12, "triple loop"))
    });
    r.run("oracle softmax [1,2,3]", Group::Oracle, || {
        let g = Graph::new();
        let out = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0])?).softmax(0)?.value();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let want: Vec<f64> = e.iter().map(|v| v / s).collect();
        Ok(within(max_diff(out.data(), &want), 1e-12, "exp/sum"))
    });
    r.run("oracle conv2d", Group::Oracle, || {
        let mut worst = 0.0f64;
        for (i, (stride, pad)) in [(1, 1), (2, 1), (1, 0)].into_iter().enumerate() {
            let x = randn(&[1, 2, 4, 4], 210 + i as u64);
            let k = randn(&[3, 2, 3, 3], 220 + i as u64);
            let b = randn(&[3], 230 + i as u64);
            let g = Graph::new();
            let out = g.constant(x.clone()).conv2d(g.constant(k.clone()), Some(g.constant(b.clone())), stride, pad)?;
            worst = worst.max(out.value().max_abs_diff(&oracles::conv2d(&x, &k, Some(&b), stride, pad)));
        }
        Ok(within(worst, 1e-10, "sliding window, 3 geometries"))
    });
    r.run("oracle adaptive_avg_pool2d", Group::Oracle, || {
        let g = Graph::new();
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64);
        let out = g.constant(x).adaptive_avg_pool2d(2, 2)?.value();
        Ok(within(max_diff(out.data(), &[3.5, 5.5, 11.5, 13.5]), 1e-12, "bin means of 1..16"))
    });
    r.run("oracle batch_norm statistics", Group::Oracle, || {
        let (n, c, s) = (4, 3, 5);
        let mut x = randn(&[n, c, s], 240);
        for ch in 0..c {
            let idx: Vec<usize> = (0..n).flat_map(|b| (0..s).map(move |k| (b * c + ch) * s + k)).collect();
            let m = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / idx.len() as f64;
            let sd = (idx.iter().map(|&i| (x.data()[i] - m).powi(2)).sum::<f64>() / idx.len() as f64).sqrt();
            for &i in &idx {
                x.data_mut()[i] = 3.0 + 2.0 * (x.data()[i] - m) / sd;
            }
        }
        let g = Graph::new();
        let (out, _) = g.constant(x).batch_norm_train(g.constant(Tensor::ones(&[c])), g.constant(Tensor::zeros(&[c])), 1e-5)?;
        let out = out.value();
        let want_sd = 2.0 / (4.0f64 + 1e-5).sqrt();
        let mut worst = 0.0f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| (0..s).map(move |k| (b * c + ch) * s + k)).map(|i| out.data()[i]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            worst = worst.max(m.abs()).max((sd - want_sd).abs());
        }
        Ok(within(worst, 1e-6, "input mean 3, std 2 per channel"))
    });
    r.run("oracle spatial volume", Group::Oracle, || {
        let mut worst = 0.0f64;
        let mut count = 0;
        for t in 2..=3 {
            for c in 1..=8 {
                for h in 1..=4 {
                    for w in 1..=4 {
                        let desc = randn(&[t, c, h, w], (t * 1000 + c * 100 + h * 10 + w) as u64);
                        for f in 0..t {
                            let got = csl::build_spatial_volume(&desc, f)?.expect("T >= 2");
                            worst = worst.max(got.max_abs_diff(&oracles::spatial_volume(&desc, f, NCC_EPS)));
                            count += 1;
                        }
                    }
                }
            }
        }
        Ok(within(worst, 1e-10, format!("{count} volumes, T <= 3, C <= 8, H, W <= 4")))
    });
    r.run("oracle channel volume", Group::Oracle, || {
        let mut worst = 0.0f64;
        let mut count = 0;
        for t in 2..=3 {
            for c in 1..=8 {
                for h in 1..=4 {
                    for w in (1..=4).filter(|w| h * w >= 2) {
                        let desc = randn(&[t, c, h, w], (50_000 + t * 1000 + c * 100 + h * 10 + w) as u64);
                        for f in 0..t {
                            let got = csl::build_channel_volume(&desc, f)?.expect("T >= 2");
                            worst = worst.max(got.max_abs_diff(&oracles::channel_volume(&desc, f, NCC_EPS)));
                            count += 1;
                        }
                    }
                }
            }
        }
        Ok(within(worst, 1e-10, format!("{count} volumes, T <= 3, C <= 8, H, W <= 4")))
    });
    r.run("oracle STI spatial relation", Group::Oracle, || {
        let mut worst = 0.0f64;
        for (i, &(t, c, h, w, c1, h1, w1)) in [(2, 8, 4, 4, 4, 2, 2), (3, 6, 3, 2, 4, 2, 1), (2, 4, 5, 3, 3, 2, 2)].iter().enumerate() {
            let (store, sti) = sti_module(t, c, h, w, (c1, h1, w1), 250 + i as u64)?;
            let x = randn(&[2 * t, c, h, w], 260 + i as u64);
            let g = Graph::new();
            let p = store.bind(&g, Mode::Eval);
            let (f_s, _) = sti.spatial_relation(&p, g.constant(x.clone()))?;
            let want = oracles::spatial_relation(&projections(&store, "spatial"), &x, h1, w1);
            worst = worst.max(f_s.value().max_abs_diff(&want));
        }
        Ok(within(worst, 1e-10, "per-position loops, 3 configs"))
    });
    r.run("oracle STI temporal relation", Group::Oracle, || {
        let mut worst = 0.0f64;
        for (i, &(t, c, h, w)) in [(2, 8, 4, 4), (3, 6, 3, 2), (1, 4, 2, 2), (4, 3, 2, 3)].iter().enumerate() {
            let (store, sti) = sti_module(t, c, h, w, (2, 1, 1), 270 + i as u64)?;
            let x = randn(&[2 * t, c, h, w], 280 + i as u64);
            let g = Graph::new();
            let p = store.bind(&g, Mode::Eval);
            let (f_t, _) = sti.temporal_relation(&p, g.constant(x.clone()))?;
            let want = oracles::temporal_relation(&projections(&store, "temporal"), &x, t);
            worst = worst.max(f_t.value().max_abs_diff(&want));
        }
        Ok(within(worst, 1e-10, "per-position loops, 4 configs"))
    });
    r.run("oracle pairwise distances", Group::Oracle, || {
        let x = randn(&[5, 3], 290);
        let want = oracles::distances(&x);
        let g = Graph::new();
        let a = g.constant(x.clone()).pairwise_distances()?.value();
        let b = model::pairwise_distances(&x)?;
        Ok(within(max_diff(a.data(), &want).max(max_diff(b.data(), &want)), 1e-10, "5x3, loop"))
    });
    r.run("oracle batch-hard triplet", Group::Oracle, || {
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let mut worst = 0.0f64;
        for s in 0..20 {
            let x = randn(&[8, 4], 300 + s);
            let g = Graph::new();
            let got = batch_hard_triplet(g.constant(x.clone()), &labels, 0.3)?.value().item();
            worst = worst.max((got - oracles::triplet(&x, &labels, 0.3)).abs());
        }
        Ok(within(worst, 1e-9, "20 batches of 8x4, brute force over triplets"))
    });
    r.run("oracle label-smoothed cross-entropy", Group::Oracle, || {
        let logits = Tensor::new(&[1, 3], vec![2.0, 0.0, 0.0])?;
        let g = Graph::new();
        let got = label_smooth_ce(g.constant(logits.clone()), &[0], 0.1)?.value().item();
        let z = 2f64.exp() + 2.0;
        let direct = -(0.9 + 0.1 / 3.0) * (2.0 - z.ln()) - 2.0 * (0.1 / 3.0) * (-z.ln());
        let looped = oracles::smoothed_ce(&logits, &[0], 0.1);
        Ok(within((got - direct).abs().max((got - looped).abs()), 1e-9, "logits [2, 0, 0], eps 0.1"))
    });
    r.run("oracle total loss components", Group::Oracle, || {
        let labels = [0, 0, 1, 1, 2, 2];
        let (f, l) = (randn(&[6, 5], 320), randn(&[6, 3], 321));
        let g = Graph::new();
        let total = total_loss(g.constant(f.clone()), g.constant(l.clone()), &labels, 0.3, 0.1)?.total.value().item();
        let parts = oracles::triplet(&f, &labels, 0.3) + oracles::smoothed_ce(&l, &labels, 0.1);
        Ok(within((total - parts).abs(), 1e-12, "triplet + cross-entropy"))
    });
    r.run("oracle Adam first step", Group::Oracle, || {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let lr = 3e-4;
        let mut worst = 0.0f64;
        for g in [0.5, -3.0, 10.0] {
            let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
            adam_step(&cfg, lr, 1, &mut p, &[g], &mut m, &mut v);
            worst = worst.max((p[0] - (1.0 - lr * f64::signum(g))).abs());
        }
        Ok(within(worst, 1e-9, "moves by -lr*sign(g)"))
    });
}

fn projections<'a>(store: &'a ParamStore, block: &str) -> oracles::Projections<'a> {
    let get = |n: &str| store.get(store.find(&format!("sti.{block}_{n}")).expect("sti parameter"));
    oracles::Projections {
        qk: (get("qk.weight"), get("qk.bias")),
        v: (get("v.weight"), get("v.bias")),
        out: (get("out.weight"), get("out.bias")),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation from 1 of the sums of `x` over `axis`.
fn normalization_error(x: &Tensor, axis: usize) -> f64 {
    let s = x.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut worst = 0.0f64;
    for o in 0..outer {
        for i in 0..inner {
            let sum: f64 = (0..s[axis]).map(|k| x.data()[(o * s[axis] + k) * inner + i]).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    worst
}

const STI_CONFIGS: [(usize, usize, usize, usize, (usize, usize, usize)); 4] = [
    (2, 8, 4, 4, (4, 2, 2)),
    (3, 6, 3, 2, (4, 2, 1)),
    (4, 16, 8, 4, (16, 4, 2)),
    (1, 4, 2, 2, (2, 1, 1)),
];

/// Fraction of `values` outside the open unit interval, with the range seen.
fn gate_outcome(values: &[f64], what: &str) -> Outcome {
    let outside = values.iter().filter(|&&z| !(z > 0.0 && z < 1.0)).count();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    within(outside as f64, 0.0, format!("{} {what} in [{lo:.4}, {hi:.4}]", values.len()))
}

fn structure_checks(r: &mut Runner<'_>) {
    r.run("zero-initialized STI is identity", Group::Structure, || {
        let mut worst = 0.0f64;
        for (i, &(t, c, h, w, cfg)) in STI_CONFIGS.iter().enumerate() {
            let (mut store, sti) = sti_module(t, c, h, w, cfg, 400 + i as u64)?;
            for id in store.ids().collect::<Vec<_>>() {
                store.get_mut(id).data_mut().fill(0.0);
            }
            let x = randn(&[2 * t, c, h, w], 410 + i as u64);
            let g = Graph::new();
            let p = store.bind(&g, Mode::Train);
            worst = worst.max(sti.forward(&p, g.constant(x.clone()))?.value().max_abs_diff(&x));
        }
        Ok(within(worst, 1e-12, "max abs deviation, 4 configs"))
    });
    r.run("attention maps normalized", Group::Structure, || {
        let mut worst = 0.0f64;
        let mut maps = 0;
        for (i, &(t, c, h, w, cfg)) in STI_CONFIGS.iter().enumerate() {
            let (store, sti) = sti_module(t, c, h, w, cfg, 420 + i as u64)?;
            let x = randn(&[3 * t, c, h, w], 430 + i as u64).data().iter().map(|v| 3.0 * v).collect();
            let g = Graph::new();
            let p = store.bind(&g, Mode::Train);
            let rel = sti.relations(&p, g.constant(Tensor::new(&[3 * t, c, h, w], x)?))?;
            worst = worst.max(normalization_error(&rel.m_s.value(), 1)).max(normalization_error(&rel.m_t.value(), 1));
            maps += rel.m_s.shape()[0] + rel.m_t.shape()[0];
        }
        Ok(within(worst, 1e-6, format!("{maps} spatial and temporal maps")))
    });
    r.run("co-saliency gates in (0, 1)", Group::Structure, || {
        let mut gates = Vec::new();
        for (i, &(t, c, c_l, h, w, grid)) in [(3, 8, 4, 4, 4, (2, 2)), (4, 16, 16, 8, 4, (4, 2)), (1, 4, 2, 2, 2, (2, 1))].iter().enumerate() {
            let (store, csl) = csl_module(t, c, c_l, h, w, grid, 440 + i as u64)?;
            let g = Graph::new();
            let p = store.bind(&g, Mode::Train);
            let (_, att) = csl.forward(&p, g.constant(randn(&[2 * t, c, h, w], 450 + i as u64)))?;
            gates.extend_from_slice(att.z.value().data());
        }
        let cfg = CstnetConfig::desk(4);
        let net = Cstnet::new(cfg.clone(), 460)?;
        let clips = randn(&[2, cfg.clip_len, cfg.in_channels, cfg.height, cfg.width], 461);
        let g = Graph::new();
        let p = net.store.bind(&g, Mode::Train);
        for att in net.forward(&p, g.constant(clips))?.attention {
            gates.extend_from_slice(att.z.value().data());
        }
        Ok(gate_outcome(&gates, "gates"))
    });
    r.run("fusion gates in (0, 1)", Group::Structure, || {
        let mut gates = Vec::new();
        for (i, &(t, c, h, w, cfg)) in STI_CONFIGS.iter().enumerate() {
            let (store, sti) = sti_module(t, c, h, w, cfg, 470 + i as u64)?;
            let g = Graph::new();
            let p = store.bind(&g, Mode::Train);
            let rel = sti.relations(&p, g.constant(randn(&[2 * t, c, h, w], 480 + i as u64)))?;
            let (_, fg) = sti.fuse_relations(&p, rel.f_s, rel.f_t)?;
            gates.extend_from_slice(fg.a_s.value().data());
            gates.extend_from_slice(fg.a_t.value().data());
        }
        Ok(gate_outcome(&gates, "gates"))
    });
}

/// Random ranking instance with small id, camera and distance alphabets so
/// that exclusions and ties are common.
fn ranking_instance(q: usize, g: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
    let ids = (q + g).div_ceil(3).max(2);
    let dist = Tensor::from_fn(&[q, g], |_| rng.gen_range(0..6) as f64 * 0.5);
    let qi = (0..q).map(|_| rng.gen_range(0..ids)).collect();
    let qc = (0..q).map(|_| rng.gen_range(0..2)).collect();
    let gi = (0..g).map(|_| rng.gen_range(0..ids)).collect();
    let gc = (0..g).map(|_| rng.gen_range(0..2)).collect();
    (dist, qi, qc, gi, gc)
}

struct MetricTally {
    cmc_mismatches: usize,
    map_error: f64,
    monotonicity_violations: usize,
    instances: usize,
    all_excluded: usize,
}

impl MetricTally {
    fn add(&mut self, inst: (Tensor, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>), max_rank: usize) -> Result<()> {
        let (dist, qi, qc, gi, gc) = inst;
        let (qs, gs) = (Side::new(&qi, &qc), Side::new(&gi, &gc));
        let Some((cmc, map)) = oracles::ranking(&dist, qs, gs, max_rank) else {
            self.all_excluded += 1;
            return Ok(());
        };
        let got = rank_metrics(&dist, qs, gs, max_rank)?;
        self.instances += 1;
        if got.cmc != cmc {
            self.cmc_mismatches += 1;
        }
        self.map_error = self.map_error.max((got.map - map).abs());
        self.monotonicity_violations += got.cmc.windows(2).filter(|w| w[1] < w[0]).count();
        Ok(())
    }
}

fn metric_checks(r: &mut Runner<'_>) {
    let mut tally = MetricTally {
        cmc_mismatches: 0,
        map_error: 0.0,
        monotonicity_violations: 0,
        instances: 0,
        all_excluded: 0,
    };
    let mut rg = rng(500);
    let mut status = Ok(());
    'outer: for q in 1..=8 {
        for g in 1..=12 {
            for _ in 0..10 {
                let inst = ranking_instance(q, g, &mut rg);
                if let Err(e) = tally.add(inst, g) {
                    status = Err(e);
                    break 'outer;
                }
            }
        }
    }
    let exhaustive = tally.instances;
    if status.is_ok() {
        for i in 0..100 {
            let (q, g) = if i % 2 == 0 { (6, 10) } else { (rg.gen_range(9..=30), rg.gen_range(13..=60)) };
            if let Err(e) = tally.add(ranking_instance(q, g, &mut rg), 20) {
                status = Err(e);
                break;
            }
        }
    }
    let large = tally.instances - exhaustive;
    let detail = format!(
        "{exhaustive} instances over Q <= 8, G <= 12 plus {large} larger; {} fully excluded skipped",
        tally.all_excluded
    );
    let status = status.map_err(|e| e.to_string());
    let fail = |e: &String| Err(crate::Error::Contract(e.clone()));
    r.run("metric CMC matches oracle", Group::Metric, || match &status {
        Ok(()) => Ok(within(tally.cmc_mismatches as f64, 0.0, format!("exact; {detail}"))),
        Err(e) => fail(e),
    });
    r.run("metric mAP matches oracle", Group::Metric, || match &status {
        Ok(()) => Ok(within(tally.map_error, 1e-9, detail.clone())),
        Err(e) => fail(e),
    });
    r.run("metric CMC monotone", Group::Metric, || match &status {
        Ok(()) => Ok(within(tally.monotonicity_violations as f64, 0.0, format!("{} curves", tally.instances))),
        Err(e) => fail(e),
    });
}
