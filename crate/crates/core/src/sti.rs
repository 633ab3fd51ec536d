//! Spatial-temporal interaction.
//!
//! Two non-local relation blocks run on the gated stage features: a spatial
//! block attending from every position of a frame to a pooled grid of key
//! positions of the same frame, and a temporal block attending from every
//! frame to all frames of the clip at the same position. Their outputs are
//! cross-gated channel-wise (the spatial feature is weighted by a gate computed
//! from the temporal one, and vice versa), summed, and added back onto the
//! stage features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, Bindings, Conv2d, Linear, ParamStore, LINEAR_GAIN};
use crate::tensor::Var;

/// Gain of the output projections relative to the usual fan-in init. Small,
/// so a fresh module is close to the identity while the ReLU after the
/// projection still passes gradient.
pub const OUTPUT_INIT_GAIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiConfig {
    pub c_in: usize,
    /// Inner channels `C_1` of the query/key/value projections.
    pub c_1: usize,
    /// Pooled key/value grid `H_1 × W_1` of the spatial block.
    pub h_1: usize,
    pub w_1: usize,
}

impl StiConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.c_1 == 0 || self.c_1 > self.c_in {
            return Err(Error::config(format!(
                "sti: C_1 = {} must be in 1..={}",
                self.c_1, self.c_in
            )));
        }
        if self.h_1 == 0 || self.w_1 == 0 || self.h_1 > h || self.w_1 > w {
            return Err(Error::config(format!(
                "sti: pooled grid {}x{} does not fit stage extent {h}x{w}",
                self.h_1, self.w_1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RelationFeatures<'g> {
    /// Spatial relation feature, `(N·T)×C×H×W`.
    pub f_s: Var<'g>,
    /// Temporal relation feature, `(N·T)×C×H×W`.
    pub f_t: Var<'g>,
    /// Spatial relation map per frame, `(N·T)×(H_1·W_1)×(H·W)`; softmax over axis 1.
    pub m_s: Var<'g>,
    /// Temporal relation map per clip position, `(N·H·W)×T×T`; softmax over axis 1.
    pub m_t: Var<'g>,
}

/// Channel gates of the fusion block, one `N×C` row per clip.
#[derive(Clone, Copy, Debug)]
pub struct FusionGates<'g> {
    /// Weight of the spatial feature, computed from the temporal feature.
    pub a_s: Var<'g>,
    /// Weight of the temporal feature, computed from the spatial feature.
    pub a_t: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct Sti {
    pub cfg: StiConfig,
    pub clip_len: usize,
    pub h: usize,
    pub w: usize,
    /// Shared by the spatial query and key.
    spatial_qk: Conv2d,
    spatial_v: Conv2d,
    spatial_out: Conv2d,
    /// Shared by the temporal query and key.
    temporal_qk: Conv2d,
    temporal_v: Conv2d,
    temporal_out: Conv2d,
    gate_s: Linear,
    gate_t: Linear,
}

fn output_conv<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_1: usize, c: usize, rng: &mut R) -> Conv2d {
    let conv = Conv2d::new(store, name, c_1, c, 1, 1, true, LINEAR_GAIN, rng);
    let w = fan_in_uniform(&[c, c_1, 1, 1], c_1, OUTPUT_INIT_GAIN, rng);
    *store.get_mut(conv.weight) = w;
    conv
}

impl Sti {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: StiConfig,
        clip_len: usize,
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(h, w)?;
        if clip_len == 0 {
            return Err(Error::config("sti: clip length must be >= 1"));
        }
        let (c, c1) = (cfg.c_in, cfg.c_1);
        let conv = |store: &mut ParamStore, suffix: &str, rng: &mut R| {
            Conv2d::new(store, &format!("{name}.{suffix}"), c, c1, 1, 1, true, LINEAR_GAIN, rng)
        };
        let spatial_qk = conv(store, "spatial_qk", rng);
        let spatial_v = conv(store, "spatial_v", rng);
        let spatial_out = output_conv(store, &format!("{name}.spatial_out"), c1, c, rng);
        let temporal_qk = conv(store, "temporal_qk", rng);
        let temporal_v = conv(store, "temporal_v", rng);
        let temporal_out = output_conv(store, &format!("{name}.temporal_out"), c1, c, rng);
        let gate_s = Linear::new(store, &format!("{name}.gate_s"), c, c, rng);
        let gate_t = Linear::new(store, &format!("{name}.gate_t"), c, c, rng);
        Ok(Sti {
            cfg,
            clip_len,
            h,
            w,
            spatial_qk,
            spatial_v,
            spatial_out,
            temporal_qk,
            temporal_v,
            temporal_out,
            gate_s,
            gate_t,
        })
    }

    fn check_input(&self, f: &Var<'_>) -> Result<usize> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.cfg.c_in || s[2] != self.h || s[3] != self.w {
            return Err(Error::dim(format!(
                "sti expects (N·T)×{}×{}×{}, got {s:?}",
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

    /// Non-local attention within each frame over a pooled key grid.
    pub fn spatial_relation<'g>(&self, p: &Bindings<'g, '_>, f: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let frames = self.check_input(&f)?;
        let (c1, hw) = (self.cfg.c_1, self.h * self.w);
        let keys = self.cfg.h_1 * self.cfg.w_1;
        let q_full = self.spatial_qk.forward(p, f)?;
        let k = q_full
            .adaptive_avg_pool2d(self.cfg.h_1, self.cfg.w_1)?
            .reshape(&[frames, c1, keys])?;
        let q = q_full.reshape(&[frames, c1, hw])?;
        let v = self
            .spatial_v
            .forward(p, f)?
            .adaptive_avg_pool2d(self.cfg.h_1, self.cfg.w_1)?
            .reshape(&[frames, c1, keys])?;
        let m_s = k.transpose()?.matmul(q)?.softmax(1)?;
        let agg = v.matmul(m_s)?.reshape(&[frames, c1, self.h, self.w])?;
        let f_s = self.spatial_out.forward(p, agg)?.relu();
        Ok((f_s, m_s))
    }

    /// Non-local attention across the frames of a clip at each position.
    pub fn temporal_relation<'g>(&self, p: &Bindings<'g, '_>, f: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let frames = self.check_input(&f)?;
        let (t, c1, hw) = (self.clip_len, self.cfg.c_1, self.h * self.w);
        let n = frames / t;
        // (N·T)×C1×H×W -> (N·HW)×C1×T
        let to_positions = |x: Var<'g>| -> Result<Var<'g>> {
            x.reshape(&[n, t, c1, hw])?
                .permute(&[0, 3, 2, 1])?
                .reshape(&[n * hw, c1, t])
        };
        let q = to_positions(self.temporal_qk.forward(p, f)?)?;
        let v = to_positions(self.temporal_v.forward(p, f)?)?;
        let m_t = q.transpose()?.matmul(q)?.softmax(1)?;
        let agg = v
            .matmul(m_t)?
            .reshape(&[n, hw, c1, t])?
            .permute(&[0, 3, 2, 1])?
            .reshape(&[frames, c1, self.h, self.w])?;
        let f_t = self.temporal_out.forward(p, agg)?.relu();
        Ok((f_t, m_t))
    }

    pub fn relations<'g>(&self, p: &Bindings<'g, '_>, f: Var<'g>) -> Result<RelationFeatures<'g>> {
        let (f_s, m_s) = self.spatial_relation(p, f)?;
        let (f_t, m_t) = self.temporal_relation(p, f)?;
        Ok(RelationFeatures { f_s, f_t, m_s, m_t })
    }

    /// Cross-gated channel-wise sum `a_s ⊙ F_s + a_t ⊙ F_t`.
    pub fn fuse_relations<'g>(
        &self,
        p: &Bindings<'g, '_>,
        f_s: Var<'g>,
        f_t: Var<'g>,
    ) -> Result<(Var<'g>, FusionGates<'g>)> {
        if f_s.shape() != f_t.shape() {
            return Err(Error::dim(format!(
                "fusion inputs differ: {:?} vs {:?}",
                f_s.shape(),
                f_t.shape()
            )));
        }
        let frames = self.check_input(&f_s)?;
        let (t, c, hw) = (self.clip_len, self.cfg.c_in, self.h * self.w);
        let n = frames / t;
        let clip_pool = |x: Var<'g>| -> Result<Var<'g>> {
            x.reshape(&[n, t, c, hw])?.mean_axes(&[1, 3], false)
        };
        let a_s = self.gate_s.forward(p, clip_pool(f_t)?)?.sigmoid();
        let a_t = self.gate_t.forward(p, clip_pool(f_s)?)?.sigmoid();
        let scale = |x: Var<'g>, a: Var<'g>| -> Result<Var<'g>> {
            x.reshape(&[n, t, c, hw])?.mul(a.reshape(&[n, 1, c, 1])?)
        };
        let fused = scale(f_s, a_s)?
            .add(scale(f_t, a_t)?)?
            .reshape(&[frames, c, self.h, self.w])?;
        Ok((fused, FusionGates { a_s, a_t }))
    }

    /// `f + fuse(spatial(f), temporal(f))`.
    pub fn forward<'g>(&self, p: &Bindings<'g, '_>, f: Var<'g>) -> Result<Var<'g>> {
        let rel = self.relations(p, f)?;
        let (fused, _) = self.fuse_relations(p, rel.f_s, rel.f_t)?;
        f.add(fused)
    }
}
