//! Run configuration: a TOML file with a fixed key set, command-line
//! overrides, and a resolved echo written next to every run's outputs.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/desk"
//! data_dir = "runs/data"   # default: <out_dir>/dataset
//! checkpoint_every = 10
//!
//! [synth]            # SynthSpec fields
//! [model]            # preset = "desk" | "micro" | "paper", ablation = "base" | "csl" | "sti" | "full"
//! [train]            # TrainConfig fields, with [train.adam] and [train.augment]
//! [eval]             # max_rank, checkpoint (default: <out_dir>/final.ck)
//! ```
//!
//! Every section and key is optional; missing values take the desk
//! defaults. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{Ablation, CstnetConfig};
use crate::training::TrainConfig;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "CSTNET_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub ablation: Ablation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            ablation: Ablation::Full,
        }
    }
}

impl ModelSection {
    pub fn build(&self, num_identities: usize) -> Result<CstnetConfig> {
        Ok(CstnetConfig::preset(&self.preset, num_identities)?.with_ablation(self.ablation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_rank: usize,
    /// Defaults to `<out_dir>/final.ck`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_rank: 20,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset directory; defaults to `<out_dir>/dataset`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub synth: SynthSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("cstnet-out"),
            data_dir: None,
            checkpoint_every: 0,
            synth: SynthSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.max_rank == 0 {
            return Err(Error::config("eval.max_rank must be at least 1"));
        }
        self.synth.validate().map_err(|e| Error::config(e.to_string()))?;
        self.model.build(self.synth.num_identities.max(1))?.validate()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("dataset"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.eval.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("final.ck"))
    }

    /// Applies the output-directory override from the environment, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
    }

    /// Writes `<out_dir>/<command>.resolved.toml` and returns its path.
    pub fn write_echo(&self, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(format!("{command}.resolved.toml"));
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
