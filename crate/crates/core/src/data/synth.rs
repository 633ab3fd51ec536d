//! Synthetic pedestrian tracklets with controllable nuisances.
//!
//! Every identity owns a fixed appearance (head, torso and leg colours, a
//! torso pattern, a body width). A frame paints a camera background, then
//! clutter patches whose colours are often borrowed from other identities,
//! then the person at a jittered position, then an optional occluder, and
//! finally applies a per-frame illumination change `a·x + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Sequence, Split, VideoDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub cameras: usize,
    /// Training sequences per identity and camera.
    pub train_per_camera: usize,
    /// Held-out sequences per identity and camera; camera 0 ones become
    /// queries, the rest gallery.
    pub eval_per_camera: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub height: usize,
    pub width: usize,
    /// Maximum horizontal offset of the person, in pixels.
    pub placement_jitter: usize,
    /// Clutter strength `σ_b`: blend weight of clutter patches and scale of
    /// background pixel noise.
    pub background_clutter: f64,
    /// Range of the per-frame illumination gain `a`.
    pub illumination_gain: [f64; 2],
    /// Range of the per-frame illumination offset `b`.
    pub illumination_offset: [f64; 2],
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::learnability()
    }
}

impl SynthSpec {
    /// No nuisances at all.
    pub fn clean(num_identities: usize, seed: u64) -> Self {
        SynthSpec {
            num_identities,
            cameras: 2,
            train_per_camera: 1,
            eval_per_camera: 1,
            seq_len_min: 8,
            seq_len_max: 8,
            height: 32,
            width: 16,
            placement_jitter: 0,
            background_clutter: 0.0,
            illumination_gain: [1.0, 1.0],
            illumination_offset: [0.0, 0.0],
            occlusion_prob: 0.0,
            seed,
        }
    }

    /// 16 identities, 2 cameras, moderate nuisances.
    pub fn learnability() -> Self {
        SynthSpec {
            num_identities: 16,
            cameras: 2,
            train_per_camera: 2,
            eval_per_camera: 1,
            seq_len_min: 8,
            seq_len_max: 16,
            height: 32,
            width: 16,
            placement_jitter: 2,
            background_clutter: 0.3,
            illumination_gain: [0.8, 1.2],
            illumination_offset: [-0.1, 0.1],
            occlusion_prob: 0.1,
            seed: 7,
        }
    }

    /// Heavy clutter and illumination jitter on short tracklets, so that
    /// averaging over frames does not wash the nuisances out.
    pub fn clutter() -> Self {
        SynthSpec {
            num_identities: 16,
            cameras: 2,
            train_per_camera: 2,
            eval_per_camera: 2,
            seq_len_min: 4,
            seq_len_max: 8,
            height: 32,
            width: 16,
            placement_jitter: 2,
            background_clutter: 1.0,
            illumination_gain: [0.5, 1.5],
            illumination_offset: [-0.3, 0.3],
            occlusion_prob: 0.2,
            seed: 12,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "clean" => Ok(Self::clean(16, 7)),
            "learnability" => Ok(Self::learnability()),
            "clutter" => Ok(Self::clutter()),
            other => Err(Error::config(format!(
                "unknown dataset preset `{other}` (expected clean, learnability or clutter)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::contract("synthetic dataset needs at least one identity"));
        }
        if self.cameras == 0 {
            return Err(Error::contract("synthetic dataset needs at least one camera"));
        }
        if self.eval_per_camera > 0 && self.cameras < 2 {
            return Err(Error::contract("query/gallery splits need at least two cameras"));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(Error::contract(format!(
                "invalid sequence length range {}..={}",
                self.seq_len_min, self.seq_len_max
            )));
        }
        if self.height < 8 || self.width < 4 {
            return Err(Error::contract(format!(
                "frames of {}x{} are too small (minimum 8x4)",
                self.height, self.width
            )));
        }
        if 2 * self.placement_jitter >= self.width {
            return Err(Error::contract("placement jitter must be less than half the width"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::contract("occlusion probability must be in [0, 1]"));
        }
        if !(self.background_clutter >= 0.0 && self.background_clutter.is_finite()) {
            return Err(Error::contract("background clutter must be finite and non-negative"));
        }
        let [a_lo, a_hi] = self.illumination_gain;
        let [b_lo, b_hi] = self.illumination_offset;
        if !(a_lo > 0.0 && a_lo <= a_hi && a_hi.is_finite()) {
            return Err(Error::contract("illumination gain range must satisfy 0 < lo <= hi"));
        }
        if !(b_lo <= b_hi && b_lo.is_finite() && b_hi.is_finite()) {
            return Err(Error::contract("illumination offset range must satisfy lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Plain,
    Stripes(usize),
    Logo,
}

#[derive(Clone, Debug)]
struct Identity {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    accent: [f64; 3],
    pattern: Pattern,
    half_width: usize,
}

fn colour<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

/// Independent stream per purpose so identities do not depend on counts.
fn stream(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 40) | index);
    rng
}

const IDENTITY_STREAM: u64 = 1;
const CAMERA_STREAM: u64 = 2;
const SEQUENCE_STREAM: u64 = 3;

fn make_identity(spec: &SynthSpec, id: usize) -> Identity {
    let mut rng = stream(spec.seed, IDENTITY_STREAM, id as u64);
    let pattern = match rng.gen_range(0..3) {
        0 => Pattern::Plain,
        1 => Pattern::Stripes(rng.gen_range(2..=3)),
        _ => Pattern::Logo,
    };
    let max_half = (spec.width / 4).max(2);
    Identity {
        head: colour(&mut rng),
        torso: colour(&mut rng),
        legs: colour(&mut rng),
        accent: colour(&mut rng),
        pattern,
        half_width: rng.gen_range(2..=max_half),
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn fill_rect(&mut self, top: isize, left: isize, rows: usize, cols: usize, c: [f64; 3], alpha: f64) {
        for y in top.max(0)..(top + rows as isize).min(self.h as isize) {
            for x in left.max(0)..(left + cols as isize).min(self.w as isize) {
                for (ch, &v) in c.iter().enumerate() {
                    let p = &mut self.px[(ch * self.h + y as usize) * self.w + x as usize];
                    *p = (1.0 - alpha) * *p + alpha * v;
                }
            }
        }
    }
}

fn draw_person(cv: &mut Canvas, who: &Identity, cx: isize, top: isize) {
    let h = cv.h;
    let head_rows = (h * 3 / 16).max(2);
    let torso_rows = (h * 11 / 32).max(2);
    let leg_rows = h.saturating_sub(head_rows + torso_rows + 3).max(2);
    let hw = who.half_width as isize;
    let head_half = (hw / 2).max(1);
    cv.fill_rect(top, cx - head_half, head_rows, 2 * head_half as usize, who.head, 1.0);
    let torso_top = top + head_rows as isize;
    cv.fill_rect(torso_top, cx - hw, torso_rows, 2 * hw as usize, who.torso, 1.0);
    match who.pattern {
        Pattern::Plain => {}
        Pattern::Stripes(period) => {
            for r in (period..torso_rows).step_by(2 * period) {
                cv.fill_rect(torso_top + r as isize, cx - hw, period, 2 * hw as usize, who.accent, 1.0);
            }
        }
        Pattern::Logo => {
            let s = (hw as usize).max(2);
            cv.fill_rect(torso_top + (torso_rows / 2 - s / 2) as isize, cx - s as isize / 2, s, s, who.accent, 1.0);
        }
    }
    let legs_top = torso_top + torso_rows as isize;
    let leg_w = (hw as usize).max(1);
    cv.fill_rect(legs_top, cx - hw, leg_rows, leg_w, who.legs, 1.0);
    cv.fill_rect(legs_top, cx + hw - leg_w as isize, leg_rows, leg_w, who.legs, 1.0);
}

fn render_sequence(
    spec: &SynthSpec,
    identities: &[Identity],
    background: &[[f64; 3]],
    who: usize,
    camera: usize,
    seq_index: usize,
) -> Tensor {
    let mut rng = stream(spec.seed, SEQUENCE_STREAM, seq_index as u64);
    let (h, w) = (spec.height, spec.width);
    let len = rng.gen_range(spec.seq_len_min..=spec.seq_len_max);
    let j = spec.placement_jitter as isize;
    let base_dx = if j > 0 { rng.gen_range(-j..=j) } else { 0 };
    let top = if j > 0 { rng.gen_range(0..=1) } else { 1 };
    let sigma = spec.background_clutter;
    let noise = Normal::new(0.0, 0.1 * sigma.max(1e-12)).expect("positive std");
    let [a_lo, a_hi] = spec.illumination_gain;
    let [b_lo, b_hi] = spec.illumination_offset;
    let mut out = Vec::with_capacity(len * CHANNELS * h * w);
    for _ in 0..len {
        let bg = background[camera];
        let mut cv = Canvas {
            h,
            w,
            px: Vec::with_capacity(CHANNELS * h * w),
        };
        for c in bg {
            for y in 0..h {
                let shade = 0.8 + 0.4 * y as f64 / h as f64;
                cv.px.extend(std::iter::repeat(c * shade).take(w));
            }
        }
        if sigma > 0.0 {
            for _ in 0..4 {
                let rows = rng.gen_range(3..=(h / 3).max(3));
                let cols = rng.gen_range(2..=(w / 2).max(2));
                let y = rng.gen_range(0..h) as isize - rows as isize / 2;
                let x = rng.gen_range(0..w) as isize - cols as isize / 2;
                let c = if rng.gen_bool(0.5) {
                    let other = &identities[rng.gen_range(0..identities.len())];
                    if rng.gen_bool(0.5) {
                        other.torso
                    } else {
                        other.legs
                    }
                } else {
                    colour(&mut rng)
                };
                cv.fill_rect(y, x, rows, cols, c, sigma.min(1.0));
            }
            for p in cv.px.iter_mut() {
                *p += noise.sample(&mut rng);
            }
        }
        let wobble = if j > 0 { rng.gen_range(-1..=1) } else { 0 };
        let cx = (w / 2) as isize + (base_dx + wobble).clamp(-j, j);
        draw_person(&mut cv, &identities[who], cx, top);
        if spec.occlusion_prob > 0.0 && rng.gen_bool(spec.occlusion_prob) {
            let rows = rng.gen_range(h / 5..=(2 * h / 5).max(h / 5 + 1));
            let y = rng.gen_range(0..h - rows) as isize;
            let cols = rng.gen_range(w / 2..=w);
            let x = rng.gen_range(0..=w - cols) as isize;
            cv.fill_rect(y, x, rows, cols, colour(&mut rng), 1.0);
        }
        let a = if a_lo < a_hi { rng.gen_range(a_lo..a_hi) } else { a_lo };
        let b = if b_lo < b_hi { rng.gen_range(b_lo..b_hi) } else { b_lo };
        out.extend(cv.px.iter().map(|&v| (a * v + b) as f32 as f64));
    }
    Tensor::new(&[len, CHANNELS, h, w], out).expect("frame buffer size")
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<VideoDataset> {
    spec.validate()?;
    let identities: Vec<Identity> = (0..spec.num_identities).map(|i| make_identity(spec, i)).collect();
    let background: Vec<[f64; 3]> = (0..spec.cameras)
        .map(|c| colour(&mut stream(spec.seed, CAMERA_STREAM, c as u64)))
        .collect();
    let mut sequences = Vec::new();
    for id in 0..spec.num_identities {
        for cam in 0..spec.cameras {
            let plan = std::iter::repeat(Split::Train)
                .take(spec.train_per_camera)
                .chain(std::iter::repeat(if cam == 0 { Split::Query } else { Split::Gallery }).take(spec.eval_per_camera));
            for split in plan {
                let frames = render_sequence(spec, &identities, &background, id, cam, sequences.len());
                sequences.push(Sequence {
                    identity: id,
                    camera: cam,
                    split,
                    frames,
                });
            }
        }
    }
    Ok(VideoDataset { sequences })
}

fn mean_frame(s: &Sequence) -> Vec<f64> {
    let per = s.frames.len() / s.len();
    let mut m = vec![0.0; per];
    for i in 0..s.len() {
        for (a, v) in m.iter_mut().zip(s.frame(i)) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= s.len() as f64);
    m
}

/// Difficulty probe: share of query sequences whose mean frame is nearest
/// (Euclidean, raw pixels) to the centroid of their own identity's training
/// sequences.
pub fn nearest_centroid_rank1(data: &VideoDataset) -> Result<f64> {
    let groups = data.train_groups();
    let centroids: Vec<(usize, Vec<f64>)> = groups
        .iter()
        .map(|(&id, idx)| {
            let means: Vec<Vec<f64>> = idx.iter().map(|&i| mean_frame(&data.sequences[i])).collect();
            let mut c = vec![0.0; means[0].len()];
            for m in &means {
                c.iter_mut().zip(m).for_each(|(a, v)| *a += v);
            }
            c.iter_mut().for_each(|v| *v /= means.len() as f64);
            (id, c)
        })
        .collect();
    let queries: Vec<&Sequence> = data.split(Split::Query).collect();
    if queries.is_empty() || centroids.is_empty() {
        return Err(Error::contract("nearest-centroid probe needs training and query sequences"));
    }
    let mut hits = 0;
    for q in &queries {
        let m = mean_frame(q);
        let best = centroids
            .iter()
            .map(|(id, c)| (c.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), *id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("non-empty");
        if best.1 == q.identity {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}
