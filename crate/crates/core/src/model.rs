//! Full network: a five-stage residual backbone with co-saliency and
//! spatial-temporal interaction modules inserted after chosen stages, clip
//! level average pooling, and a two-layer head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csl::{CoSaliencyAttention, Csl, CslConfig, NCC_EPS};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Bindings, Conv2d, Linear, Mode, ParamStore, RELU_GAIN};
use crate::sti::{Sti, StiConfig};
use crate::tensor::{Graph, Tensor, Var};

pub const NUM_STAGES: usize = 5;

/// Modules placed after one backbone stage (1-based index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Insertion {
    pub stage: usize,
    pub csl: Option<CslConfig>,
    pub sti: Option<StiConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CstnetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub clip_len: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub num_identities: usize,
    pub embedding_dim: usize,
    pub insertions: Vec<Insertion>,
}

/// Which inserted modules are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Base,
    Csl,
    Sti,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Base, Ablation::Csl, Ablation::Sti, Ablation::Full];

    pub fn keeps_csl(self) -> bool {
        matches!(self, Ablation::Csl | Ablation::Full)
    }

    pub fn keeps_sti(self) -> bool {
        matches!(self, Ablation::Sti | Ablation::Full)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Base => "base",
            Ablation::Csl => "csl",
            Ablation::Sti => "sti",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Ablation::Base),
            "csl" => Ok(Ablation::Csl),
            "sti" => Ok(Ablation::Sti),
            "full" => Ok(Ablation::Full),
            other => Err(Error::config(format!(
                "unknown ablation `{other}` (expected base, csl, sti or full)"
            ))),
        }
    }
}

/// Inserted-module sizes. `None` pooled extents default to [`pooled_extent`].
struct ModuleSizes {
    c_l: usize,
    hw_l: Option<(usize, usize)>,
    c_1: usize,
    hw_1: (usize, usize),
}

fn half(x: usize) -> usize {
    (x / 2).max(1)
}

/// Default channel-descriptor grid for a stage of extent `h × w`: every
/// dimension longer than 2 is halved, so small stages keep at least four
/// values per descriptor (a two-value descriptor correlates to ±1 only).
pub fn pooled_extent(h: usize, w: usize) -> (usize, usize) {
    let shrink = |x: usize| if x > 2 { x / 2 } else { x };
    let (hl, wl) = (shrink(h), shrink(w));
    if hl * wl < h * w {
        (hl, wl)
    } else {
        (half(h), w)
    }
}

impl CstnetConfig {
    fn assemble(
        base: CstnetConfig,
        points: &[usize],
        sizes: ModuleSizes,
    ) -> CstnetConfig {
        let extents = base.stage_extents();
        let insertions = points
            .iter()
            .map(|&stage| {
                let c = base.stage_channels[stage - 1];
                let (h, w) = extents[stage - 1];
                let (h_l, w_l) = match sizes.hw_l {
                    Some((a, b)) => (a.min(half(h)), b.min(half(w))),
                    None => pooled_extent(h, w),
                };
                Insertion {
                    stage,
                    csl: Some(CslConfig {
                        c_in: c,
                        c_l: sizes.c_l.min(c),
                        h_l,
                        w_l,
                        ncc_eps: NCC_EPS,
                    }),
                    sti: Some(StiConfig {
                        c_in: c,
                        c_1: sizes.c_1.min(c),
                        h_1: sizes.hw_1.0.min(h),
                        w_1: sizes.hw_1.1.min(w),
                    }),
                }
            })
            .collect();
        CstnetConfig { insertions, ..base }
    }

    /// Desk-scale network: `T = 4`, `32×16` frames, channels 8/16/32/64/128.
    pub fn desk(num_identities: usize) -> Self {
        let base = CstnetConfig {
            in_channels: 3,
            height: 32,
            width: 16,
            clip_len: 4,
            stage_channels: vec![8, 16, 32, 64, 128],
            stage_strides: vec![1, 2, 2, 2, 1],
            num_identities,
            embedding_dim: 64,
            insertions: vec![],
        };
        let sizes = ModuleSizes {
            c_l: 16,
            hw_l: None,
            c_1: 16,
            hw_1: (4, 2),
        };
        Self::assemble(base, &[2, 3, 4], sizes)
    }

    /// Smallest useful network, sized for finite-difference checks.
    pub fn micro(num_identities: usize) -> Self {
        let base = CstnetConfig {
            in_channels: 3,
            height: 16,
            width: 8,
            clip_len: 2,
            stage_channels: vec![4, 8, 8, 8, 8],
            stage_strides: vec![1, 2, 2, 1, 1],
            num_identities,
            embedding_dim: 8,
            insertions: vec![],
        };
        let sizes = ModuleSizes {
            c_l: 8,
            hw_l: None,
            c_1: 4,
            hw_1: (2, 2),
        };
        Self::assemble(base, &[2, 3, 4], sizes)
    }

    /// Full-size layout: `T = 8`, `256×128` frames, channels up to 2048,
    /// `C_L = 256`, `C_1 = 128`, `H_1 × W_1 = 16 × 8`.
    pub fn paper(num_identities: usize) -> Self {
        let base = CstnetConfig {
            in_channels: 3,
            height: 256,
            width: 128,
            clip_len: 8,
            stage_channels: vec![64, 256, 512, 1024, 2048],
            stage_strides: vec![4, 1, 2, 2, 2],
            num_identities,
            embedding_dim: 2048,
            insertions: vec![],
        };
        let sizes = ModuleSizes {
            c_l: 256,
            hw_l: Some((16, 8)),
            c_1: 128,
            hw_1: (16, 8),
        };
        Self::assemble(base, &[2, 3, 4], sizes)
    }

    pub fn preset(name: &str, num_identities: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(num_identities)),
            "micro" => Ok(Self::micro(num_identities)),
            "paper" => Ok(Self::paper(num_identities)),
            other => Err(Error::config(format!(
                "unknown model preset `{other}` (expected desk, micro or paper)"
            ))),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        for ins in &mut self.insertions {
            if !ablation.keeps_csl() {
                ins.csl = None;
            }
            if !ablation.keeps_sti() {
                ins.sti = None;
            }
        }
        self.insertions.retain(|i| i.csl.is_some() || i.sti.is_some());
        self
    }

    /// Stages followed by at least one inserted module.
    pub fn insertion_points(&self) -> Vec<usize> {
        self.insertions.iter().map(|i| i.stage).collect()
    }

    /// `(H, W)` at the output of every stage (3×3 convs, padding 1).
    pub fn stage_extents(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.stage_strides
            .iter()
            .map(|&s| {
                h = h.div_ceil(s.max(1));
                w = w.div_ceil(s.max(1));
                (h, w)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_STAGES || self.stage_strides.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "expected {NUM_STAGES} stage channels and strides, got {} and {}",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        let positive = [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("clip_len", self.clip_len),
            ("num_identities", self.num_identities),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.stage_channels.contains(&0) || self.stage_strides.contains(&0) {
            return Err(Error::config("stage channels and strides must be positive"));
        }
        let extents = self.stage_extents();
        let mut seen = Vec::new();
        for ins in &self.insertions {
            if !(1..=NUM_STAGES).contains(&ins.stage) {
                return Err(Error::config(format!(
                    "insertion stage {} outside 1..={NUM_STAGES}",
                    ins.stage
                )));
            }
            if seen.contains(&ins.stage) {
                return Err(Error::config(format!("stage {} has two insertions", ins.stage)));
            }
            seen.push(ins.stage);
            let c = self.stage_channels[ins.stage - 1];
            let (h, w) = extents[ins.stage - 1];
            if let Some(csl) = &ins.csl {
                if csl.c_in != c {
                    return Err(Error::config(format!(
                        "csl after stage {} has c_in {} but the stage has {c} channels",
                        ins.stage, csl.c_in
                    )));
                }
                csl.validate(h, w)?;
            }
            if let Some(sti) = &ins.sti {
                if sti.c_in != c {
                    return Err(Error::config(format!(
                        "sti after stage {} has c_in {} but the stage has {c} channels",
                        ins.stage, sti.c_in
                    )));
                }
                sti.validate(h, w)?;
            }
        }
        Ok(())
    }
}

/// Two 3×3 conv + BN layers with a shortcut (1×1 conv + BN when the shape
/// changes) and a final ReLU.
#[derive(Clone, Debug)]
pub struct ResidualStage {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResidualStage {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, false, RELU_GAIN, rng);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c_out);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, false, RELU_GAIN, rng);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c_out);
        let shortcut = (c_in != c_out || stride != 1).then(|| {
            (
                Conv2d::new(store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, false, RELU_GAIN, rng),
                BatchNorm::new(store, &format!("{name}.shortcut_bn"), c_out),
            )
        });
        ResidualStage {
            c_in,
            c_out,
            stride,
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.c_in {
            return Err(Error::config(format!(
                "stage expects {} input channels, got shape {s:?}",
                self.c_in
            )));
        }
        let y = self.bn1.forward(p, self.conv1.forward(p, x)?)?.relu();
        let y = self.bn2.forward(p, self.conv2.forward(p, y)?)?;
        let short = match &self.shortcut {
            Some((conv, bn)) => bn.forward(p, conv.forward(p, x)?)?,
            None => x,
        };
        Ok(y.add(short)?.relu())
    }
}

#[derive(Clone, Debug)]
struct InsertedModules {
    stage: usize,
    csl: Option<Csl>,
    sti: Option<Sti>,
}

/// Output of a forward pass over `N` clips.
#[derive(Clone, Debug)]
pub struct ClipEmbedding<'g> {
    /// `N × embedding_dim` retrieval feature.
    pub feature: Var<'g>,
    /// `N × num_identities` identity logits.
    pub logits: Var<'g>,
    /// Co-saliency attention of every CSL module, in stage order.
    pub attention: Vec<CoSaliencyAttention<'g>>,
}

/// Parameter counts, split by role.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    /// Learned scalars.
    pub trainable: usize,
    /// Running statistics.
    pub buffers: usize,
    pub backbone: usize,
    pub csl: usize,
    pub sti: usize,
    pub head: usize,
}

impl ParamCensus {
    pub fn of(store: &ParamStore) -> Self {
        let mut c = ParamCensus::default();
        for e in store.entries() {
            let n = e.value.len();
            if e.trainable {
                c.trainable += n;
            } else {
                c.buffers += n;
            }
            if e.name.contains(".csl.") {
                c.csl += n;
            } else if e.name.contains(".sti.") {
                c.sti += n;
            } else if e.name.starts_with("stage") {
                c.backbone += n;
            } else {
                c.head += n;
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.trainable + self.buffers
    }
}

#[derive(Clone, Debug)]
pub struct Cstnet {
    pub cfg: CstnetConfig,
    pub store: ParamStore,
    stages: Vec<ResidualStage>,
    inserts: Vec<InsertedModules>,
    embed: Linear,
    classifier: Linear,
}

impl Cstnet {
    /// Builds and initialises all parameters from `seed`.
    pub fn new(cfg: CstnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let extents = cfg.stage_extents();
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut inserts = Vec::new();
        let mut c_prev = cfg.in_channels;
        for i in 0..NUM_STAGES {
            let c = cfg.stage_channels[i];
            stages.push(ResidualStage::new(&mut store, &format!("stage{}", i + 1), c_prev, c, cfg.stage_strides[i], &mut rng));
            c_prev = c;
            if let Some(ins) = cfg.insertions.iter().find(|ins| ins.stage == i + 1) {
                let (h, w) = extents[i];
                let prefix = format!("insert{}", i + 1);
                let csl = match &ins.csl {
                    Some(cc) => Some(Csl::new(&mut store, &format!("{prefix}.csl"), cc.clone(), cfg.clip_len, h, w, &mut rng)?),
                    None => None,
                };
                let sti = match &ins.sti {
                    Some(sc) => Some(Sti::new(&mut store, &format!("{prefix}.sti"), sc.clone(), cfg.clip_len, h, w, &mut rng)?),
                    None => None,
                };
                inserts.push(InsertedModules { stage: i + 1, csl, sti });
            }
        }
        let embed = Linear::new(&mut store, "head.embed", c_prev, cfg.embedding_dim, &mut rng);
        let classifier = Linear::new(&mut store, "head.classifier", cfg.embedding_dim, cfg.num_identities, &mut rng);
        Ok(Cstnet {
            cfg,
            store,
            stages,
            inserts,
            embed,
            classifier,
        })
    }

    pub fn census(&self) -> ParamCensus {
        ParamCensus::of(&self.store)
    }

    pub fn stage(&self, index: usize) -> &ResidualStage {
        &self.stages[index - 1]
    }

    /// Checks a `N×T×C×H×W` clip batch and returns `N`.
    pub fn check_clips(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.cfg;
        let want = [c.clip_len, c.in_channels, c.height, c.width];
        if shape.len() != 5 || shape[1..] != want || shape[0] == 0 {
            return Err(Error::contract(format!(
                "clip batch must be N×{}×{}×{}×{}, got {shape:?}",
                want[0], want[1], want[2], want[3]
            )));
        }
        Ok(shape[0])
    }

    /// Forward pass over a `N×T×C×H×W` clip batch.
    pub fn forward<'g>(&self, p: &Bindings<'g, '_>, clips: Var<'g>) -> Result<ClipEmbedding<'g>> {
        let n = self.check_clips(&clips.shape())?;
        let c = &self.cfg;
        let t = c.clip_len;
        let mut x = clips.reshape(&[n * t, c.in_channels, c.height, c.width])?;
        let mut attention = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(p, x)?;
            if let Some(ins) = self.inserts.iter().find(|m| m.stage == i + 1) {
                if let Some(csl) = &ins.csl {
                    let (gated, att) = csl.forward(p, x)?;
                    attention.push(att);
                    x = gated;
                }
                if let Some(sti) = &ins.sti {
                    x = sti.forward(p, x)?;
                }
            }
        }
        let c_last = c.stage_channels[NUM_STAGES - 1];
        let pooled = x.mean_axes(&[2, 3], false)?.reshape(&[n, t, c_last])?.mean_axes(&[1], false)?;
        let feature = self.embed.forward(p, pooled)?;
        let logits = self.classifier.forward(p, feature)?;
        Ok(ClipEmbedding {
            feature,
            logits,
            attention,
        })
    }

    /// Eval-mode features for a clip batch, processed `chunk` clips at a time.
    pub fn embed(&self, clips: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = self.check_clips(clips.shape())?;
        let per_clip = clips.len() / n;
        let e = self.cfg.embedding_dim;
        let mut out = Vec::with_capacity(n * e);
        let mut start = 0;
        while start < n {
            let m = chunk.max(1).min(n - start);
            let mut shape = clips.shape().to_vec();
            shape[0] = m;
            let part = Tensor::new(&shape, clips.data()[start * per_clip..(start + m) * per_clip].to_vec())?;
            let g = Graph::new();
            let p = self.store.bind(&g, Mode::Eval);
            let emb = self.forward(&p, g.constant(part))?;
            out.extend_from_slice(emb.feature.value().data());
            start += m;
        }
        Tensor::new(&[n, e], out)
    }
}

/// Euclidean distances between the rows of an `n×d` matrix.
pub fn pairwise_distances(features: &Tensor) -> Result<Tensor> {
    cross_distances(features, features)
}

/// Euclidean distances between rows of `a` (`m×d`) and rows of `b` (`n×d`).
pub fn cross_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::dim(format!("distance inputs {sa:?} and {sb:?} are not m×d and n×d")));
    }
    let (m, n, d) = (sa[0], sb[0], sa[1]);
    let (x, y) = (a.data(), b.data());
    Ok(Tensor::from_fn(&[m, n], |k| {
        let (i, j) = (k / n, k % n);
        (0..d)
            .map(|c| (x[i * d + c] - y[j * d + c]).powi(2))
            .sum::<f64>()
            .sqrt()
    }))
}

#[cfg(test)]
mod tests;
