//! Metric and identification losses.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

fn check_rows(v: Var<'_>, labels: &[usize], what: &str) -> Result<(usize, usize)> {
    let s = v.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("{what} must be a matrix, got {s:?}")));
    }
    if s[0] != labels.len() {
        return Err(Error::dim(format!("{what} has {} rows but {} labels", s[0], labels.len())));
    }
    Ok((s[0], s[1]))
}

/// Hardest positive and hardest negative of every anchor, by index.
pub fn hardest_pairs(dist: &Tensor, labels: &[usize]) -> Vec<(usize, usize)> {
    let n = labels.len();
    let d = dist.data();
    (0..n)
        .map(|a| {
            let row = &d[a * n..(a + 1) * n];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.map_or(true, |p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.map_or(true, |q| row[j] < row[q]) {
                    neg = Some(j);
                }
            }
            (pos.expect("checked positives"), neg.expect("checked negatives"))
        })
        .collect()
}

/// Mean over anchors of `max(0, margin + max_pos d − min_neg d)` on
/// Euclidean distances.
pub fn batch_hard_triplet<'g>(features: Var<'g>, labels: &[usize], margin: f64) -> Result<Var<'g>> {
    let (n, _) = check_rows(features, labels, "features")?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::contract("batch-hard triplet needs at least two identities"));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::contract(format!("identity {l} has a single sample, so no positive pair")));
    }
    let dist = features.pairwise_distances()?;
    let pairs = hardest_pairs(&dist.value(), labels);
    let pos = dist.gather(&pairs.iter().enumerate().map(|(a, &(p, _))| a * n + p).collect::<Vec<_>>())?;
    let neg = dist.gather(&pairs.iter().enumerate().map(|(a, &(_, q))| a * n + q).collect::<Vec<_>>())?;
    Ok(pos.sub(neg)?.add_scalar(margin).relu().mean())
}

/// Smoothed targets `q_k = (1 − ε)·[k = y] + ε / K`, one row per label.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Tensor {
    let mut q = Tensor::full(&[labels.len(), classes], eps / classes as f64);
    for (i, &y) in labels.iter().enumerate() {
        q.data_mut()[i * classes + y] += 1.0 - eps;
    }
    q
}

/// Mean cross-entropy against label-smoothed targets.
pub fn label_smooth_ce<'g>(logits: Var<'g>, labels: &[usize], eps: f64) -> Result<Var<'g>> {
    let (n, k) = check_rows(logits, labels, "logits")?;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::contract(format!("label smoothing {eps} outside [0, 1)")));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {y} out of range for {k} classes")));
    }
    if n == 0 {
        return Err(Error::contract("cross-entropy over an empty batch"));
    }
    let q = logits.graph().constant(smoothed_targets(labels, k, eps));
    let logp = logits.log_softmax(1)?;
    Ok(q.mul(logp)?.sum().scale(-1.0 / n as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g> {
    pub triplet: Var<'g>,
    pub id: Var<'g>,
    /// Unweighted sum of the two.
    pub total: Var<'g>,
}

pub fn total_loss<'g>(
    features: Var<'g>,
    logits: Var<'g>,
    labels: &[usize],
    margin: f64,
    eps: f64,
) -> Result<LossTerms<'g>> {
    let triplet = batch_hard_triplet(features, labels, margin)?;
    let id = label_smooth_ce(logits, labels, eps)?;
    Ok(LossTerms {
        triplet,
        id,
        total: triplet.add(id)?,
    })
}
