//! Query/gallery evaluation of a trained network.

use crate::data::{clip_indices, gather_clip, Split, VideoDataset};
use crate::error::{Error, Result};
use crate::metrics::{rank_metrics, RankingMetrics, Side};
use crate::model::{cross_distances, Cstnet};
use crate::tensor::Tensor;

/// Clips embedded per forward pass.
pub const EVAL_CHUNK: usize = 16;

/// Features of one split, with the identity and camera of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitFeatures {
    pub features: Tensor,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl SplitFeatures {
    pub fn side(&self) -> Side<'_> {
        Side::new(&self.ids, &self.cams)
    }
}

/// One evenly spaced clip of `T` frames per sequence of `split`, stacked
/// into an `N×T×C×H×W` tensor.
pub fn split_clips(data: &VideoDataset, split: Split, clip_len: usize) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let Some([c, h, w]) = data.frame_shape() else {
        return Err(Error::contract("dataset is empty"));
    };
    let mut values = Vec::new();
    let (mut ids, mut cams) = (Vec::new(), Vec::new());
    for s in data.split(split) {
        gather_clip(s, &clip_indices(s.len(), clip_len, 0.0), &mut values);
        ids.push(s.identity);
        cams.push(s.camera);
    }
    if ids.is_empty() {
        return Err(Error::contract(format!("dataset has no {split} sequences")));
    }
    let clips = Tensor::new(&[ids.len(), clip_len, c, h, w], values)?;
    Ok((clips, ids, cams))
}

pub fn embed_split(net: &Cstnet, data: &VideoDataset, split: Split) -> Result<SplitFeatures> {
    let (clips, ids, cams) = split_clips(data, split, net.cfg.clip_len)?;
    Ok(SplitFeatures {
        features: net.embed(&clips, EVAL_CHUNK)?,
        ids,
        cams,
    })
}

/// Ranks precomputed features by Euclidean distance.
pub fn evaluate_features(query: &SplitFeatures, gallery: &SplitFeatures, max_rank: usize) -> Result<RankingMetrics> {
    let dist = cross_distances(&query.features, &gallery.features)?;
    rank_metrics(&dist, query.side(), gallery.side(), max_rank)
}

/// Embeds every query and gallery sequence in eval mode and ranks them.
pub fn evaluate(net: &Cstnet, data: &VideoDataset, max_rank: usize) -> Result<RankingMetrics> {
    let query = embed_split(net, data, Split::Query)?;
    let gallery = embed_split(net, data, Split::Gallery)?;
    evaluate_features(&query, &gallery, max_rank)
}
