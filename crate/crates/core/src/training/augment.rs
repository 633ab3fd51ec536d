//! Horizontal flipping and random erasing, applied identically to every
//! frame of a clip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the frame, `[lo, hi]`.
    pub erase_area: [f64; 2],
    /// Lower bound `r` of the aspect ratio; ratios are drawn from `[r, 1/r]`.
    pub erase_min_aspect: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            erase_prob: 0.3,
            erase_area: [0.02, 0.33],
            erase_min_aspect: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let [lo, hi] = self.erase_area;
        if !prob(self.flip_prob) || !prob(self.erase_prob) {
            return Err(Error::config("augmentation probabilities must be in [0, 1]"));
        }
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("erase_area must satisfy 0 < lo <= hi <= 1"));
        }
        if !(self.erase_min_aspect > 0.0 && self.erase_min_aspect <= 1.0) {
            return Err(Error::config("erase_min_aspect must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Rectangle `(top, left, height, width)` in pixels.
pub type Rect = (usize, usize, usize, usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Augmentation {
    pub flipped: bool,
    pub erased: Option<Rect>,
}

const ERASE_ATTEMPTS: usize = 100;

fn erase_rect<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Option<Rect> {
    let area = (h * w) as f64;
    let r = cfg.erase_min_aspect;
    for _ in 0..ERASE_ATTEMPTS {
        let target = rng.gen_range(cfg.erase_area[0]..=cfg.erase_area[1]) * area;
        let aspect = rng.gen_range(r..=1.0 / r);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            let top = rng.gen_range(0..=h - eh);
            let left = rng.gen_range(0..=w - ew);
            return Some((top, left, eh, ew));
        }
    }
    None
}

/// Augments one `T×C×H×W` clip in place. `fill` holds one value per channel.
pub fn augment_clip<R: Rng + ?Sized>(
    clip: &mut [f64],
    shape: [usize; 4],
    fill: &[f64],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Augmentation {
    let [t, c, h, w] = shape;
    debug_assert_eq!(clip.len(), t * c * h * w);
    let flipped = rng.gen::<f64>() < cfg.flip_prob;
    let erased = if rng.gen::<f64>() < cfg.erase_prob {
        erase_rect(cfg, h, w, rng)
    } else {
        None
    };
    for (i, px) in clip.chunks_exact_mut(h * w).enumerate() {
        if flipped {
            for row in px.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if let Some((top, left, eh, ew)) = erased {
            let v = fill[i % c];
            for y in top..top + eh {
                px[y * w + left..y * w + left + ew].fill(v);
            }
        }
    }
    Augmentation { flipped, erased }
}
