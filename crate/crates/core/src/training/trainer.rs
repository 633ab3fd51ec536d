use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_clip, AugmentConfig, Augmentation};
use super::loss::{total_loss, DEFAULT_MARGIN, DEFAULT_SMOOTHING};
use super::optim::{Adam, AdamConfig, StepSchedule};
use super::sampler::{pk_sample, PkBatch};
use crate::data::VideoDataset;
use crate::error::{Error, Result};
use crate::model::Cstnet;
use crate::nn::Mode;
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Clips per identity.
    pub k: usize,
    /// Defaults to enough batches to visit every training identity once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches_per_epoch: Option<usize>,
    pub lr: f64,
    /// Epochs between learning-rate drops; 0 disables them.
    pub lr_step_every: usize,
    pub lr_gamma: f64,
    pub margin: f64,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 50,
            p: 8,
            k: 2,
            batches_per_epoch: None,
            lr: 1e-3,
            lr_step_every: 0,
            lr_gamma: 0.1,
            margin: DEFAULT_MARGIN,
            label_smoothing: DEFAULT_SMOOTHING,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            epochs: 600,
            p: 16,
            k: 4,
            lr: 3e-4,
            lr_step_every: 200,
            ..Self::desk()
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.lr,
            every: self.lr_step_every,
            gamma: self.lr_gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::config(format!(
                "batch-hard mining needs P >= 2 and K >= 2, got P = {}, K = {}",
                self.p, self.k
            )));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::config("batches_per_epoch must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::config("lr must be finite and >= 0, lr_gamma in (0, 1]"));
        }
        if !(self.margin >= 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("margin must be >= 0 and label_smoothing in [0, 1)"));
        }
        self.adam.validate()?;
        self.augment.validate()
    }
}

/// Per-batch log line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: u64,
    pub triplet_loss: f64,
    pub id_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Deterministic per-epoch means; no timing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    pub triplet_loss: f64,
    pub id_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub summary: EpochSummary,
    pub batches: Vec<BatchRecord>,
    pub wall_time_s: f64,
}

/// Model, optimizer and sampling state of one training run.
pub struct Trainer {
    pub net: Cstnet,
    pub optim: Adam,
    pub cfg: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    rng: ChaCha8Rng,
    fill: Vec<f64>,
}

/// Training draws come from their own stream so they never alias model init.
const TRAIN_STREAM: u64 = 1;

impl Trainer {
    pub fn new(net: Cstnet, data: &VideoDataset, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let classes = data.train_identities();
        if classes.len() != net.cfg.num_identities {
            return Err(Error::config(format!(
                "model has {} identity classes but the training split has {}",
                net.cfg.num_identities,
                classes.len()
            )));
        }
        let m = &net.cfg;
        if data.frame_shape() != Some([m.in_channels, m.height, m.width]) {
            return Err(Error::config(format!(
                "dataset frames {:?} do not match the model input {}×{}×{}",
                data.frame_shape(),
                m.in_channels,
                m.height,
                m.width
            )));
        }
        if classes.len() < cfg.p {
            return Err(Error::config(format!(
                "P = {} exceeds the {} training identities",
                cfg.p,
                classes.len()
            )));
        }
        let optim = Adam::new(&net.store, cfg.adam)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            net,
            optim,
            cfg,
            epoch: 0,
            rng,
            fill: data.train_mean(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.cfg
            .batches_per_epoch
            .unwrap_or_else(|| self.net.cfg.num_identities.div_ceil(self.cfg.p))
    }

    /// Draws a PK batch and augments it.
    pub fn sample_batch(&mut self, data: &VideoDataset) -> Result<(PkBatch, Vec<Augmentation>)> {
        let m = &self.net.cfg;
        let mut batch = pk_sample(data, self.cfg.p, self.cfg.k, m.clip_len, &mut self.rng)?;
        let shape = [m.clip_len, m.in_channels, m.height, m.width];
        let per = shape.iter().product::<usize>();
        let augs = batch
            .clips
            .data_mut()
            .chunks_exact_mut(per)
            .map(|clip| augment_clip(clip, shape, &self.fill, &self.cfg.augment, &mut self.rng))
            .collect();
        Ok((batch, augs))
    }

    fn describe(&self, batch: &PkBatch, what: &str) -> Error {
        let sources: Vec<String> = batch
            .provenance
            .iter()
            .map(|s| format!("id {} seq {} frames {:?}", s.identity, s.sequence, s.frames))
            .collect();
        Error::Numeric(format!(
            "{what} at step {} (epoch {}); batch: {}",
            self.optim.state.step + 1,
            self.epoch,
            sources.join("; ")
        ))
    }

    /// Forward, loss, backward and one optimizer update on `batch`.
    pub fn step(&mut self, batch: &PkBatch, lr: f64) -> Result<BatchRecord> {
        let graph = Graph::new();
        let bound = self.net.store.bind(&graph, Mode::Train);
        let forward = self.net.forward(&bound, graph.constant(batch.clips.clone())).and_then(|out| {
            total_loss(out.feature, out.logits, &batch.labels, self.cfg.margin, self.cfg.label_smoothing)
        });
        let terms = match forward {
            Ok(t) => t,
            Err(Error::Numeric(m)) => return Err(self.describe(batch, &m)),
            Err(e) => return Err(e),
        };
        let total = terms.total.value().item();
        if !total.is_finite() {
            return Err(self.describe(batch, &format!("loss became {total}")));
        }
        terms.total.backward()?;
        let grads = bound.gradients();
        let running = bound.take_updates();
        let grad_norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let record = BatchRecord {
            epoch: self.epoch,
            step: self.optim.state.step + 1,
            triplet_loss: terms.triplet.value().item(),
            id_loss: terms.id.value().item(),
            total_loss: total,
            lr,
            grad_norm,
            wall_time_s: 0.0,
        };
        drop(bound);
        self.optim.step(&mut self.net.store, &grads, lr)?;
        self.net.store.apply_updates(running);
        Ok(record)
    }

    /// Runs one epoch of PK batches. `on_batch` sees every record as it is
    /// produced.
    pub fn train_epoch(&mut self, data: &VideoDataset, mut on_batch: impl FnMut(&BatchRecord)) -> Result<EpochReport> {
        let start = Instant::now();
        let lr = self.cfg.schedule().lr_at(self.epoch);
        let mut batches = Vec::new();
        for _ in 0..self.batches_per_epoch() {
            let t0 = Instant::now();
            let (batch, _) = self.sample_batch(data)?;
            let mut rec = self.step(&batch, lr)?;
            rec.wall_time_s = t0.elapsed().as_secs_f64();
            on_batch(&rec);
            batches.push(rec);
        }
        let n = batches.len() as f64;
        let mean = |f: fn(&BatchRecord) -> f64| batches.iter().map(f).sum::<f64>() / n;
        let summary = EpochSummary {
            epoch: self.epoch,
            batches: batches.len(),
            triplet_loss: mean(|b| b.triplet_loss),
            id_loss: mean(|b| b.id_loss),
            total_loss: mean(|b| b.total_loss),
            lr,
            grad_norm: mean(|b| b.grad_norm),
        };
        self.epoch += 1;
        Ok(EpochReport {
            summary,
            batches,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}
