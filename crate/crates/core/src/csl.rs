//! Co-saliency attention.
//!
//! Every frame of a clip is scored against all other frames of the same clip
//! with normalized cross-correlation (NCC). Two descriptor maps are used: a
//! channel-reduced map whose per-position vectors are matched across
//! positions of other frames (spatial attention), and a spatially-reduced map
//! whose per-channel vectors are matched across channels of other frames
//! (channel attention). The resulting correlation volumes are collapsed by
//! 1×1 convolutions into a spatial logit map `z_s` and a channel logit vector
//! `z_c`, and the gate is `sigmoid(z_s ⊙ z_c)`.
//!
//! All tensors here use the frame-major layout `(N·T)×C×H×W`: `N` clips of
//! `T` consecutive frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Bindings, Conv2d, ParamStore, LINEAR_GAIN, RELU_GAIN};
use crate::tensor::{Graph, Tensor, Var};

pub const NCC_EPS: f64 = 1e-5;

/// Sign applied to every NCC score. Only the fault-injection build flips it.
#[cfg(not(feature = "inject-ncc-fault"))]
pub(crate) const NCC_SIGN: f64 = 1.0;
#[cfg(feature = "inject-ncc-fault")]
pub(crate) const NCC_SIGN: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CslConfig {
    /// Channels `C` of the stage the module is attached to.
    pub c_in: usize,
    /// Reduced channel count `C_L` of the spatial descriptors.
    pub c_l: usize,
    /// Reduced extent `H_L × W_L` of the channel descriptors.
    pub h_l: usize,
    pub w_l: usize,
    #[serde(default = "default_ncc_eps")]
    pub ncc_eps: f64,
}

fn default_ncc_eps() -> f64 {
    NCC_EPS
}

impl CslConfig {
    /// Checks the config against the stage's spatial extent `h × w`.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.c_l == 0 || self.c_l > self.c_in {
            return Err(Error::config(format!(
                "csl: C_L = {} must be in 1..={}",
                self.c_l, self.c_in
            )));
        }
        if self.h_l == 0 || self.w_l == 0 || self.h_l > h || self.w_l > w {
            return Err(Error::config(format!(
                "csl: reduced extent {}x{} does not fit stage extent {h}x{w}",
                self.h_l, self.w_l
            )));
        }
        if self.h_l * self.w_l >= h * w && h * w > 1 {
            return Err(Error::config(format!(
                "csl: reduced extent {}x{} must be smaller than {h}x{w}",
                self.h_l, self.w_l
            )));
        }
        if self.h_l * self.w_l < 2 {
            return Err(Error::config(
                "csl: channel descriptors need at least 2 elements (H_L·W_L >= 2)",
            ));
        }
        if !(self.ncc_eps > 0.0) {
            return Err(Error::config("csl: ncc_eps must be positive"));
        }
        Ok(())
    }
}

/// Normalized cross-correlation of two equal-length descriptors with
/// population standard deviations, each guarded by `eps`.
pub fn ncc(p: &[f64], q: &[f64], eps: f64) -> f64 {
    assert_eq!(p.len(), q.len(), "ncc descriptors must have equal length");
    let d = p.len() as f64;
    let mp = p.iter().sum::<f64>() / d;
    let mq = q.iter().sum::<f64>() / d;
    let sp = (p.iter().map(|v| (v - mp).powi(2)).sum::<f64>() / d).sqrt();
    let sq = (q.iter().map(|v| (v - mq).powi(2)).sum::<f64>() / d).sqrt();
    let cov = p.iter().zip(q).map(|(a, b)| (a - mp) * (b - mq)).sum::<f64>() / d;
    NCC_SIGN * cov / ((sp + eps) * (sq + eps))
}

/// Attention maps for a batch of frames.
#[derive(Clone, Copy, Debug)]
pub struct CoSaliencyAttention<'g> {
    /// `(N·T)×1×H×W` spatial logits.
    pub z_s: Var<'g>,
    /// `(N·T)×C×1×1` channel logits.
    pub z_c: Var<'g>,
    /// `(N·T)×C×H×W` gate, `sigmoid(z_s ⊙ z_c)`.
    pub z: Var<'g>,
}

/// Spatial correlation volume, `(N·T)×((T−1)·H·W)×H×W`.
///
/// Returns `None` for single-frame clips, where there is nothing to
/// correlate against.
pub fn spatial_volume<'g>(desc: Var<'g>, clip_len: usize, eps: f64) -> Result<Option<Var<'g>>> {
    let s = desc.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("spatial descriptors must be rank 4, got {s:?}")));
    }
    if clip_len < 2 {
        return Ok(None);
    }
    let (frames, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = desc.reshape(&[frames, c, h * w])?.standardize(eps)?;
    let vol = cols.cross_frame_correlation(clip_len)?;
    let vol = if NCC_SIGN < 0.0 { vol.scale(NCC_SIGN) } else { vol };
    Ok(Some(vol.reshape(&[frames, (clip_len - 1) * h * w, h, w])?))
}

/// Channel correlation volume, `(N·T)×((T−1)·C)×C×1`.
pub fn channel_volume<'g>(desc: Var<'g>, clip_len: usize, eps: f64) -> Result<Option<Var<'g>>> {
    let s = desc.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("channel descriptors must be rank 4, got {s:?}")));
    }
    if clip_len < 2 {
        return Ok(None);
    }
    let (frames, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h * w < 2 {
        return Err(Error::dim("channel descriptors need H_L·W_L >= 2"));
    }
    let cols = desc
        .reshape(&[frames, c, h * w])?
        .permute(&[0, 2, 1])?
        .standardize(eps)?;
    let vol = cols.cross_frame_correlation(clip_len)?;
    let vol = if NCC_SIGN < 0.0 { vol.scale(NCC_SIGN) } else { vol };
    Ok(Some(vol.reshape(&[frames, (clip_len - 1) * c, c, 1])?))
}

fn single_clip_volume(
    desc: &Tensor,
    frame: usize,
    build: for<'g> fn(Var<'g>, usize, f64) -> Result<Option<Var<'g>>>,
) -> Result<Option<Tensor>> {
    let t = desc.shape()[0];
    if frame >= t {
        return Err(Error::contract(format!("frame {frame} out of range for T = {t}")));
    }
    let g = Graph::new();
    let Some(vol) = build(g.constant(desc.clone()), t, NCC_EPS)? else {
        return Ok(None);
    };
    let v = vol.value();
    let per = v.len() / t;
    let mut shape = v.shape().to_vec();
    shape.remove(0);
    Ok(Some(Tensor::new(&shape, v.data()[frame * per..(frame + 1) * per].to_vec())?))
}

/// Volume of frame `frame` for one clip of spatial descriptors `T×C_L×H×W`:
/// shape `((T−1)·H·W)×H×W`, or `None` when `T = 1`.
pub fn build_spatial_volume(desc: &Tensor, frame: usize) -> Result<Option<Tensor>> {
    if desc.rank() != 4 {
        return Err(Error::dim(format!("expected T×C_L×H×W, got {:?}", desc.shape())));
    }
    single_clip_volume(desc, frame, spatial_volume)
}

/// Volume of frame `frame` for one clip of channel descriptors
/// `T×C×H_L×W_L`: shape `((T−1)·C)×C×1×1`, or `None` when `T = 1`.
pub fn build_channel_volume(desc: &Tensor, frame: usize) -> Result<Option<Tensor>> {
    if desc.rank() != 4 {
        return Err(Error::dim(format!("expected T×C×H_L×W_L, got {:?}", desc.shape())));
    }
    let Some(v) = single_clip_volume(desc, frame, channel_volume)? else {
        return Ok(None);
    };
    let s = v.shape().to_vec();
    Ok(Some(v.reshape(&[s[0], s[1], 1, 1])?))
}

/// Learned parameters of one co-saliency module.
#[derive(Clone, Debug)]
pub struct Csl {
    pub cfg: CslConfig,
    pub clip_len: usize,
    pub h: usize,
    pub w: usize,
    spatial_reduce: Conv2d,
    spatial_bn: BatchNorm,
    channel_reduce: Conv2d,
    channel_bn: BatchNorm,
    spatial_summary: Option<Conv2d>,
    channel_summary: Option<Conv2d>,
}

impl Csl {
    /// Builds the module for clips of `clip_len` frames at stage extent `h × w`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: CslConfig,
        clip_len: usize,
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(h, w)?;
        if clip_len == 0 {
            return Err(Error::config("csl: clip length must be >= 1"));
        }
        let spatial_reduce = Conv2d::new(store, &format!("{name}.spatial_reduce"), cfg.c_in, cfg.c_l, 1, 1, false, RELU_GAIN, rng);
        let spatial_bn = BatchNorm::new(store, &format!("{name}.spatial_bn"), cfg.c_l);
        let channel_reduce = Conv2d::new(store, &format!("{name}.channel_reduce"), cfg.c_in, cfg.c_in, 1, 1, false, RELU_GAIN, rng);
        let channel_bn = BatchNorm::new(store, &format!("{name}.channel_bn"), cfg.c_in);
        let (spatial_summary, channel_summary) = if clip_len >= 2 {
            (
                Some(Conv2d::new(store, &format!("{name}.spatial_summary"), (clip_len - 1) * h * w, 1, 1, 1, true, LINEAR_GAIN, rng)),
                Some(Conv2d::new(store, &format!("{name}.channel_summary"), (clip_len - 1) * cfg.c_in, 1, 1, 1, true, LINEAR_GAIN, rng)),
            )
        } else {
            (None, None)
        };
        Ok(Csl {
            cfg,
            clip_len,
            h,
            w,
            spatial_reduce,
            spatial_bn,
            channel_reduce,
            channel_bn,
            spatial_summary,
            channel_summary,
        })
    }

    fn check_input(&self, f: &Var<'_>) -> Result<usize> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.cfg.c_in || s[2] != self.h || s[3] != self.w {
            return Err(Error::dim(format!(
                "csl expects (N·T)×{}×{}×{}, got {s:?}",
                self.cfg.c_in, self.h, self.w
            )));
        }
        if s[0] % self.clip_len != 0 {
            return Err(Error::dim(format!(
                "{} frames is not a whole number of {}-frame clips",
                s[0], self.clip_len
            )));
        }
        Ok(s[0])
    }

    /// Descriptor maps: `(N·T)×C_L×H×W` for spatial matching and
    /// `(N·T)×C×H_L×W_L` for channel matching.
    pub fn reduce_dims<'g>(&self, p: &Bindings<'g, '_>, f: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        self.check_input(&f)?;
        let spatial = self.spatial_bn.forward(p, self.spatial_reduce.forward(p, f)?)?.relu();
        let pooled = f.adaptive_avg_pool2d(self.cfg.h_l, self.cfg.w_l)?;
        let channel = self.channel_bn.forward(p, self.channel_reduce.forward(p, pooled)?)?.relu();
        Ok((spatial, channel))
    }

    /// Collapses the volumes into attention maps. `None` volumes (single
    /// frame clips) yield zero logits and hence a uniform 0.5 gate.
    pub fn summarize_attention<'g>(
        &self,
        p: &Bindings<'g, '_>,
        spatial_vol: Option<Var<'g>>,
        channel_vol: Option<Var<'g>>,
        frames: usize,
    ) -> Result<CoSaliencyAttention<'g>> {
        let g = p.vars()[0].graph();
        let c = self.cfg.c_in;
        let z_s = match (spatial_vol, &self.spatial_summary) {
            (Some(v), Some(conv)) => {
                let s = v.shape();
                if s[0] != frames || s[1] != (self.clip_len - 1) * self.h * self.w {
                    return Err(Error::dim(format!("spatial volume {s:?} does not match {frames} frames")));
                }
                conv.forward(p, v)?
            }
            (None, _) => g.constant(Tensor::zeros(&[frames, 1, self.h, self.w])),
            (Some(_), None) => return Err(Error::dim("spatial volume given for a single-frame module")),
        };
        let z_c = match (channel_vol, &self.channel_summary) {
            (Some(v), Some(conv)) => {
                let s = v.shape();
                if s[0] != frames || s[1] != (self.clip_len - 1) * c {
                    return Err(Error::dim(format!("channel volume {s:?} does not match {frames} frames")));
                }
                conv.forward(p, v)?.reshape(&[frames, c, 1, 1])?
            }
            (None, _) => g.constant(Tensor::zeros(&[frames, c, 1, 1])),
            (Some(_), None) => return Err(Error::dim("channel volume given for a single-frame module")),
        };
        let z = z_s.mul(z_c)?.sigmoid();
        Ok(CoSaliencyAttention { z_s, z_c, z })
    }

    /// Full module: descriptors, volumes, attention, and the gated features.
    pub fn forward<'g>(&self, p: &Bindings<'g, '_>, f: Var<'g>) -> Result<(Var<'g>, CoSaliencyAttention<'g>)> {
        let frames = self.check_input(&f)?;
        let (sd, cd) = self.reduce_dims(p, f)?;
        let sv = spatial_volume(sd, self.clip_len, self.cfg.ncc_eps)?;
        let cv = channel_volume(cd, self.clip_len, self.cfg.ncc_eps)?;
        let att = self.summarize_attention(p, sv, cv, frames)?;
        Ok((apply_cosaliency(f, &att)?, att))
    }
}

/// `f ⊙ z`, no residual term.
pub fn apply_cosaliency<'g>(f: Var<'g>, att: &CoSaliencyAttention<'g>) -> Result<Var<'g>> {
    if f.shape() != att.z.shape() {
        return Err(Error::dim(format!(
            "features {:?} and attention {:?} differ",
            f.shape(),
            att.z.shape()
        )));
    }
    f.mul(att.z)
}

#[cfg(test)]
mod tests;
