//! Video re-identification datasets: in-memory representation, a synthetic
//! generator, and the on-disk layout.

mod store;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use store::{load_dataset, save_dataset, INDEX_FILE};
pub use synth::{generate_synthetic, nearest_centroid_rank1, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One tracklet: `frames` is `L×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
    pub frames: Tensor,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat values of frame `i`.
    pub fn frame(&self, i: usize) -> &[f64] {
        let per = self.frames.len() / self.len();
        &self.frames.data()[i * per..(i + 1) * per]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoDataset {
    pub sequences: Vec<Sequence>,
}

/// Sequence counts per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Census {
    pub identities: usize,
    pub cameras: usize,
    pub sequences: usize,
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
    pub frames: usize,
}

impl fmt::Display for Census {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "identities = {}, cameras = {}, sequences = {} (train {}, query {}, gallery {}), frames = {}",
            self.identities, self.cameras, self.sequences, self.train, self.query, self.gallery, self.frames
        )
    }
}

impl VideoDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    /// `C×H×W` of every frame, if the dataset is non-empty.
    pub fn frame_shape(&self) -> Option<[usize; 3]> {
        self.sequences.first().map(|s| {
            let sh = s.frames.shape();
            [sh[1], sh[2], sh[3]]
        })
    }

    pub fn census(&self) -> Census {
        let ids: std::collections::BTreeSet<_> = self.sequences.iter().map(|s| s.identity).collect();
        let cams: std::collections::BTreeSet<_> = self.sequences.iter().map(|s| s.camera).collect();
        Census {
            identities: ids.len(),
            cameras: cams.len(),
            sequences: self.sequences.len(),
            train: self.split(Split::Train).count(),
            query: self.split(Split::Query).count(),
            gallery: self.split(Split::Gallery).count(),
            frames: self.sequences.iter().map(Sequence::len).sum(),
        }
    }

    /// Training identities in ascending order; position is the class label.
    pub fn train_identities(&self) -> Vec<usize> {
        let set: std::collections::BTreeSet<_> = self.split(Split::Train).map(|s| s.identity).collect();
        set.into_iter().collect()
    }

    /// Training sequence indices grouped by identity.
    pub fn train_groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.sequences.iter().enumerate() {
            if s.split == Split::Train {
                groups.entry(s.identity).or_default().push(i);
            }
        }
        groups
    }

    /// Per-channel mean over all training frames.
    pub fn train_mean(&self) -> Vec<f64> {
        let Some([c, h, w]) = self.frame_shape() else {
            return vec![];
        };
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for s in self.split(Split::Train) {
            for (i, v) in s.frames.data().iter().enumerate() {
                sum[(i / (h * w)) % c] += v;
            }
            count += s.len() * h * w;
        }
        sum.iter().map(|v| if count > 0 { v / count as f64 } else { 0.0 }).collect()
    }

    /// Checks shapes, dense identities, and the cross-camera query rule.
    pub fn validate(&self) -> Result<()> {
        let shape = self.frame_shape();
        for (i, s) in self.sequences.iter().enumerate() {
            let sh = s.frames.shape();
            if sh.len() != 4 || Some([sh[1], sh[2], sh[3]]) != shape {
                return Err(Error::contract(format!(
                    "sequence {i} has frame tensor {sh:?}, expected L×{shape:?}"
                )));
            }
        }
        let ids: std::collections::BTreeSet<_> = self.sequences.iter().map(|s| s.identity).collect();
        if let Some(&max) = ids.iter().next_back() {
            if max + 1 != ids.len() {
                return Err(Error::contract(format!(
                    "identity ids are not dense: {} distinct, largest {max}",
                    ids.len()
                )));
            }
        }
        for (i, q) in self.sequences.iter().enumerate().filter(|(_, s)| s.split == Split::Query) {
            let ok = self
                .split(Split::Gallery)
                .any(|g| g.identity == q.identity && g.camera != q.camera);
            if !ok {
                return Err(Error::contract(format!(
                    "query sequence {i} (identity {}, camera {}) has no gallery match on another camera",
                    q.identity, q.camera
                )));
            }
        }
        Ok(())
    }
}

/// `T` frame indices for a sequence of length `len`: evenly spaced with
/// stride `len / T`, shifted by `offset ∈ [0, 1)` of a stride. Sequences
/// shorter than `T` repeat from the start.
pub fn clip_indices(len: usize, t: usize, offset: f64) -> Vec<usize> {
    if len < t {
        return (0..t).map(|i| i % len).collect();
    }
    let stride = len as f64 / t as f64;
    (0..t)
        .map(|i| (((i as f64 + offset) * stride).floor() as usize).min(len - 1))
        .collect()
}

/// Stacks `indices` of `seq` into one `T×C×H×W` block, appended to `out`.
pub fn gather_clip(seq: &Sequence, indices: &[usize], out: &mut Vec<f64>) {
    for &i in indices {
        out.extend_from_slice(seq.frame(i));
    }
}
