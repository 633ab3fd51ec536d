//! P identities × K clips × T frames.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::data::{clip_indices, gather_clip, VideoDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a clip came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClipSource {
    pub identity: usize,
    /// Index into `VideoDataset::sequences`.
    pub sequence: usize,
    pub frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PkBatch {
    /// `P·K × T × C × H × W`, grouped by identity.
    pub clips: Tensor,
    /// Class index of every clip (position among the training identities).
    pub labels: Vec<usize>,
    pub provenance: Vec<ClipSource>,
    pub p: usize,
    pub k: usize,
    pub t: usize,
}

impl PkBatch {
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.p * self.k;
        let sh = self.clips.shape();
        if sh.len() != 5 || sh[0] != n || sh[1] != self.t {
            return Err(Error::contract(format!(
                "clip tensor {sh:?} does not hold {n} clips of {} frames",
                self.t
            )));
        }
        if self.labels.len() != n || self.provenance.len() != n {
            return Err(Error::contract("labels or provenance do not match the clip count"));
        }
        let mut distinct = self.labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != self.p {
            return Err(Error::contract(format!("{} identities instead of {}", distinct.len(), self.p)));
        }
        for &l in &distinct {
            let c = self.labels.iter().filter(|&&x| x == l).count();
            if c != self.k {
                return Err(Error::contract(format!("identity {l} has {c} clips instead of {}", self.k)));
            }
        }
        if self.provenance.iter().any(|s| s.frames.len() != self.t) {
            return Err(Error::contract("a clip has the wrong number of frames"));
        }
        Ok(())
    }
}

/// Samples P training identities without replacement, K sequences for each
/// (with replacement only when an identity has fewer than K), and a T-frame
/// evenly spaced clip with random offset from each sequence.
pub fn pk_sample<R: Rng + ?Sized>(data: &VideoDataset, p: usize, k: usize, t: usize, rng: &mut R) -> Result<PkBatch> {
    if p == 0 || k == 0 || t == 0 {
        return Err(Error::contract(format!("P, K and T must be positive, got {p}, {k}, {t}")));
    }
    let groups: Vec<(usize, Vec<usize>)> = data.train_groups().into_iter().collect();
    if groups.len() < p {
        return Err(Error::contract(format!(
            "P = {p} identities requested but the training split has {}",
            groups.len()
        )));
    }
    let [c, h, w] = data.frame_shape().expect("non-empty training split");
    let mut values = Vec::with_capacity(p * k * t * c * h * w);
    let mut labels = Vec::with_capacity(p * k);
    let mut provenance = Vec::with_capacity(p * k);
    for class in sample(rng, groups.len(), p).into_vec() {
        let (identity, seqs) = &groups[class];
        let picks: Vec<usize> = if seqs.len() >= k {
            sample(rng, seqs.len(), k).into_vec()
        } else {
            (0..k).map(|_| rng.gen_range(0..seqs.len())).collect()
        };
        for i in picks {
            let seq = &data.sequences[seqs[i]];
            let offset: f64 = rng.gen();
            let frames = clip_indices(seq.len(), t, offset);
            gather_clip(seq, &frames, &mut values);
            labels.push(class);
            provenance.push(ClipSource {
                identity: *identity,
                sequence: seqs[i],
                frames,
            });
        }
    }
    Ok(PkBatch {
        clips: Tensor::new(&[p * k, t, c, h, w], values)?,
        labels,
        provenance,
        p,
        k,
        t,
    })
}
