//! Naive loop implementations used as references by the property suite.

use crate::metrics::Side;
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Sliding-window cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let x_ = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && x_ >= 0 && (y as usize) < h && (x_ as usize) < w {
                                    acc += x.get(&[b, c, y as usize, x_ as usize]) * k.get(&[o, c, u, v]);
                                }
                            }
                        }
                    }
                    out.set(&[b, o, i, j], acc);
                }
            }
        }
    }
    out
}

/// Two-pass NCC with population statistics.
pub fn ncc(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let d = p.len() as f64;
    let (mut mp, mut mq) = (0.0, 0.0);
    for i in 0..p.len() {
        mp += p[i];
        mq += q[i];
    }
    mp /= d;
    mq /= d;
    let (mut vp, mut vq, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        vp += (p[i] - mp) * (p[i] - mp);
        vq += (q[i] - mq) * (q[i] - mq);
        cov += (p[i] - mp) * (q[i] - mq);
    }
    (cov / d) / (((vp / d).sqrt() + eps) * ((vq / d).sqrt() + eps))
}

/// Quadruple loop over (k ≠ t, h, w) × (i, j).
pub fn spatial_volume(desc: &Tensor, t: usize, eps: f64) -> Tensor {
    let s = desc.shape();
    let (tl, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[(tl - 1) * h * w, h, w]);
    let mut slot = 0;
    for k in (0..tl).filter(|&k| k != t) {
        for hh in 0..h {
            for ww in 0..w {
                for i in 0..h {
                    for j in 0..w {
                        let p: Vec<f64> = (0..c).map(|ch| desc.get(&[t, ch, i, j])).collect();
                        let q: Vec<f64> = (0..c).map(|ch| desc.get(&[k, ch, hh, ww])).collect();
                        out.set(&[slot, i, j], ncc(&p, &q, eps));
                    }
                }
                slot += 1;
            }
        }
    }
    out
}

pub fn channel_volume(desc: &Tensor, t: usize, eps: f64) -> Tensor {
    let s = desc.shape();
    let (tl, c, h, w) = (s[0], s[1], s[2], s[3]);
    let chan = |f: usize, ch: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                v.push(desc.get(&[f, ch, i, j]));
            }
        }
        v
    };
    let mut out = Tensor::zeros(&[(tl - 1) * c, c, 1, 1]);
    let mut slot = 0;
    for k in (0..tl).filter(|&k| k != t) {
        for cp in 0..c {
            for cc in 0..c {
                out.set(&[slot, cc, 0, 0], ncc(&chan(t, cc), &chan(k, cp), eps));
            }
            slot += 1;
        }
    }
    out
}

/// `W·x + b` for a 1×1 convolution weight `C_out×C_in×1×1`.
pub fn project(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    (0..co)
        .map(|o| b.data()[o] + (0..ci).map(|i| w.data()[o * ci + i] * x[i]).sum::<f64>())
        .collect()
}

pub struct Projections<'a> {
    pub qk: (&'a Tensor, &'a Tensor),
    pub v: (&'a Tensor, &'a Tensor),
    pub out: (&'a Tensor, &'a Tensor),
}

/// Temporal relation feature, one position of one clip at a time.
pub fn temporal_relation(w: &Projections<'_>, x: &Tensor, t_len: usize) -> Tensor {
    let s = x.shape();
    let (frames, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    for n in 0..frames / t_len {
        for i in 0..h {
            for j in 0..wd {
                let at = |t: usize| -> Vec<f64> { (0..c).map(|ch| x.get(&[n * t_len + t, ch, i, j])).collect() };
                let q: Vec<Vec<f64>> = (0..t_len).map(|t| project(w.qk.0, w.qk.1, &at(t))).collect();
                let v: Vec<Vec<f64>> = (0..t_len).map(|t| project(w.v.0, w.v.1, &at(t))).collect();
                for tq in 0..t_len {
                    let logits: Vec<f64> = (0..t_len).map(|tk| dot(&q[tk], &q[tq])).collect();
                    let m = softmax(&logits);
                    let agg: Vec<f64> = (0..q[0].len())
                        .map(|c1| (0..t_len).map(|tk| v[tk][c1] * m[tk]).sum())
                        .collect();
                    let o = project(w.out.0, w.out.1, &agg);
                    for ch in 0..c {
                        out.set(&[n * t_len + tq, ch, i, j], o[ch].max(0.0));
                    }
                }
            }
        }
    }
    out
}

/// Spatial relation feature with keys and values pooled to `h1 × w1`.
pub fn spatial_relation(w: &Projections<'_>, x: &Tensor, h1: usize, w1: usize) -> Tensor {
    let s = x.shape();
    let (frames, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let bin = |i: usize, len: usize, out: usize| ((i * len) / out, ((i + 1) * len).div_ceil(out));
    let mut out = Tensor::zeros(s);
    for f in 0..frames {
        let at = |pos: usize| -> Vec<f64> { (0..c).map(|ch| x.get(&[f, ch, pos / wd, pos % wd])).collect() };
        let q: Vec<Vec<f64>> = (0..h * wd).map(|pos| project(w.qk.0, w.qk.1, &at(pos))).collect();
        let v: Vec<Vec<f64>> = (0..h * wd).map(|pos| project(w.v.0, w.v.1, &at(pos))).collect();
        let pool = |src: &[Vec<f64>], kp: usize| -> Vec<f64> {
            let (r0, r1) = bin(kp / w1, h, h1);
            let (c0, c1) = bin(kp % w1, wd, w1);
            let cnt = ((r1 - r0) * (c1 - c0)) as f64;
            (0..src[0].len())
                .map(|k| {
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            acc += src[r * wd + cc][k];
                        }
                    }
                    acc / cnt
                })
                .collect()
        };
        let keys: Vec<Vec<f64>> = (0..h1 * w1).map(|kp| pool(&q, kp)).collect();
        let vals: Vec<Vec<f64>> = (0..h1 * w1).map(|kp| pool(&v, kp)).collect();
        for pos in 0..h * wd {
            let logits: Vec<f64> = keys.iter().map(|k| dot(k, &q[pos])).collect();
            let m = softmax(&logits);
            let agg: Vec<f64> = (0..q[0].len())
                .map(|c1| (0..keys.len()).map(|kp| vals[kp][c1] * m[kp]).sum())
                .collect();
            let o = project(w.out.0, w.out.1, &agg);
            for ch in 0..c {
                out.set(&[f, ch, pos / wd, pos % wd], o[ch].max(0.0));
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn distances(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = x.get(&[i, k]) - x.get(&[j, k]);
                s += diff * diff;
            }
            out[i * n + j] = s.sqrt();
        }
    }
    out
}

/// Batch-hard triplet loss as a maximum over every (anchor, positive,
/// negative) triple.
pub fn triplet(x: &Tensor, labels: &[usize], margin: f64) -> f64 {
    let d = distances(x);
    let n = labels.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max(margin + d[a * n + p] - d[a * n + q]);
            }
        }
        total += worst.max(0.0);
    }
    total / n as f64
}

/// Cross-entropy against `(1 − ε)·onehot + ε/K`.
pub fn smoothed_ce(logits: &Tensor, labels: &[usize], eps: f64) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate().take(n) {
        let row: Vec<f64> = (0..k).map(|j| logits.get(&[i, j])).collect();
        let p = softmax(&row);
        for (j, pj) in p.iter().enumerate() {
            let target = eps / k as f64 + if j == label { 1.0 - eps } else { 0.0 };
            total -= target * pj.ln();
        }
    }
    total / n as f64
}

fn excluded(query: Side<'_>, gallery: Side<'_>, i: usize, j: usize) -> bool {
    gallery.ids[j] == query.ids[i] && gallery.cams[j] == query.cams[i]
}

/// 1-based rank of gallery entry `j` for query `i`, counting only kept
/// entries that sort before it (smaller distance, ties by index).
fn rank_of(dist: &Tensor, query: Side<'_>, gallery: Side<'_>, i: usize, j: usize) -> usize {
    let g = gallery.ids.len();
    let dj = dist.get(&[i, j]);
    1 + (0..g)
        .filter(|&k| k != j && !excluded(query, gallery, i, k))
        .filter(|&k| {
            let dk = dist.get(&[i, k]);
            dk < dj || (dk == dj && k < j)
        })
        .count()
}

/// CMC curve and mAP by counting, without sorting.
pub fn ranking(dist: &Tensor, query: Side<'_>, gallery: Side<'_>, max_rank: usize) -> Option<(Vec<f64>, f64)> {
    let (q, g) = (query.ids.len(), gallery.ids.len());
    let mut cmc = vec![0.0; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for i in 0..q {
        let relevant: Vec<usize> = (0..g)
            .filter(|&j| gallery.ids[j] == query.ids[i] && !excluded(query, gallery, i, j))
            .collect();
        if relevant.is_empty() {
            continue;
        }
        valid += 1;
        let ranks: Vec<usize> = relevant.iter().map(|&j| rank_of(dist, query, gallery, i, j)).collect();
        let first = *ranks.iter().min().unwrap();
        for (k, c) in cmc.iter_mut().enumerate() {
            if first <= k + 1 {
                *c += 1.0;
            }
        }
        let ap: f64 = ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        ap_sum += ap;
    }
    if valid == 0 {
        return None;
    }
    Some((cmc.into_iter().map(|c| c / valid as f64).collect(), ap_sum / valid as f64))
}
