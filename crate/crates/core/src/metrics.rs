//! Cross-camera ranking metrics.
//!
//! For every query the gallery is sorted by distance, ties broken by gallery
//! index. Gallery entries sharing both identity and camera with the query are
//! removed before ranking. A query with no remaining relevant entry is left
//! out of every mean and counted in `excluded_queries`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identity and camera of every row (query) or column (gallery).
#[derive(Clone, Copy, Debug)]
pub struct Side<'a> {
    pub ids: &'a [usize],
    pub cams: &'a [usize],
}

impl<'a> Side<'a> {
    pub fn new(ids: &'a [usize], cams: &'a [usize]) -> Self {
        Side { ids, cams }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingMetrics {
    /// `cmc[k − 1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision of each query that was not excluded, in query order.
    pub per_query_ap: Vec<f64>,
    pub excluded_queries: usize,
}

/// One structured output line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
}

impl RankingMetrics {
    /// Rank-k accuracy; ranks past the computed curve repeat its last value.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks start at 1");
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out: Vec<MetricRecord> = self
            .cmc
            .iter()
            .enumerate()
            .map(|(i, &v)| MetricRecord {
                metric: "cmc".into(),
                k: Some(i + 1),
                value: v,
            })
            .collect();
        out.push(MetricRecord {
            metric: "map".into(),
            k: None,
            value: self.map,
        });
        out.push(MetricRecord {
            metric: "excluded_queries".into(),
            k: None,
            value: self.excluded_queries as f64,
        });
        out
    }

    /// Rank-1/5/20 and mAP as percentages.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8}\n{:>7.1}% {:>7.1}% {:>7.1}% {:>7.1}%\n",
            "Rank-1",
            "Rank-5",
            "Rank-20",
            "mAP",
            100.0 * self.rank(1),
            100.0 * self.rank(5),
            100.0 * self.rank(20),
            100.0 * self.map
        )
    }
}

fn check_inputs(dist: &Tensor, query: Side<'_>, gallery: Side<'_>) -> Result<(usize, usize)> {
    let s = dist.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("distance matrix must be Q×G, got {s:?}")));
    }
    let (q, g) = (s[0], s[1]);
    if q == 0 || g == 0 {
        return Err(Error::contract("ranking needs at least one query and one gallery entry"));
    }
    if query.ids.len() != q || query.cams.len() != q {
        return Err(Error::dim(format!(
            "{q} query rows but {} ids and {} cameras",
            query.ids.len(),
            query.cams.len()
        )));
    }
    if gallery.ids.len() != g || gallery.cams.len() != g {
        return Err(Error::dim(format!(
            "{g} gallery columns but {} ids and {} cameras",
            gallery.ids.len(),
            gallery.cams.len()
        )));
    }
    if !dist.all_finite() {
        return Err(Error::Numeric("distance matrix contains non-finite values".into()));
    }
    Ok((q, g))
}

/// For each query, the relevance flags of the kept gallery entries in rank
/// order, or `None` when nothing relevant remains.
fn ranked_relevance(dist: &Tensor, query: Side<'_>, gallery: Side<'_>) -> Result<Vec<Option<Vec<bool>>>> {
    let (q, g) = check_inputs(dist, query, gallery)?;
    let d = dist.data();
    let mut out = Vec::with_capacity(q);
    for i in 0..q {
        let row = &d[i * g..(i + 1) * g];
        let mut order: Vec<usize> = (0..g)
            .filter(|&j| !(gallery.ids[j] == query.ids[i] && gallery.cams[j] == query.cams[i]))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let hits: Vec<bool> = order.iter().map(|&j| gallery.ids[j] == query.ids[i]).collect();
        out.push(hits.iter().any(|&h| h).then_some(hits));
    }
    Ok(out)
}

fn average_precision(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, _) in hits.iter().enumerate().filter(|(_, &h)| h) {
        found += 1;
        sum += found as f64 / (pos + 1) as f64;
    }
    sum / found as f64
}

/// CMC curve and mAP in one pass.
pub fn rank_metrics(dist: &Tensor, query: Side<'_>, gallery: Side<'_>, max_rank: usize) -> Result<RankingMetrics> {
    if max_rank == 0 {
        return Err(Error::contract("max_rank must be at least 1"));
    }
    let ranked = ranked_relevance(dist, query, gallery)?;
    let mut cmc = vec![0.0; max_rank];
    let mut per_query_ap = Vec::new();
    let mut excluded = 0;
    for hits in &ranked {
        let Some(hits) = hits else {
            excluded += 1;
            continue;
        };
        let first = hits.iter().position(|&h| h).expect("has a hit");
        for v in cmc.iter_mut().skip(first) {
            *v += 1.0;
        }
        per_query_ap.push(average_precision(hits));
    }
    let valid = per_query_ap.len();
    if valid == 0 {
        return Err(Error::contract(format!(
            "none of the {} queries has a valid cross-camera match",
            ranked.len()
        )));
    }
    for v in &mut cmc {
        *v /= valid as f64;
    }
    let map = per_query_ap.iter().sum::<f64>() / valid as f64;
    Ok(RankingMetrics {
        cmc,
        map,
        per_query_ap,
        excluded_queries: excluded,
    })
}

/// Rank-1 … rank-`max_rank` accuracies.
pub fn compute_cmc(dist: &Tensor, query: Side<'_>, gallery: Side<'_>, max_rank: usize) -> Result<Vec<f64>> {
    Ok(rank_metrics(dist, query, gallery, max_rank)?.cmc)
}

pub fn compute_map(dist: &Tensor, query: Side<'_>, gallery: Side<'_>) -> Result<f64> {
    Ok(rank_metrics(dist, query, gallery, 1)?.map)
}
