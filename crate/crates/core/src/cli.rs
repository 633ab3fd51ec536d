//! The `cstnet` command line: argument parsing, config resolution and the
//! five commands. Each command is also callable as a library function on a
//! resolved [`RunConfig`].
//!
//! Exit codes: 0 on success, 1 for contract, config, data or I/O errors,
//! 2 when `verify` or `gradcheck` finds a failing property.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, save_dataset, Census, SynthSpec, VideoDataset};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::RankingMetrics;
use crate::model::{Ablation, Cstnet, ParamCensus};
use crate::training::{EpochSummary, Trainer};
use crate::verify::{run_suite, Suite, VerifyReport};

#[derive(Debug, Parser)]
#[command(name = "cstnet", version, about = "Video person re-identification on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval(EvalArgs),
    /// Run the full property suite.
    Verify(VerifyArgs),
    /// Run only the finite-difference gradient checks.
    Gradcheck(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config and CSTNET_OUT_DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// clean, learnability or clutter.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub identities: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory (default: <out>/dataset).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// base, csl, sti or full.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Model initialisation and sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file (default: <out>/final.ck).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory (default: <out>/dataset).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Output directory for the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How a command that returned normally ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    VerificationFailed,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::VerificationFailed => 2,
        }
    }
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(status) => ExitCode::from(status.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = resolve(&a.common)?;
            if let Some(p) = &a.preset {
                cfg.synth = SynthSpec::preset(p)?;
            }
            if let Some(n) = a.identities {
                cfg.synth.num_identities = n;
            }
            if let Some(s) = a.seed {
                cfg.synth.seed = s;
            }
            let census = synth(&cfg)?;
            println!("{census}");
            Ok(Status::Ok)
        }
        Command::Train(a) => {
            let mut cfg = resolve(&a.common)?;
            if let Some(d) = a.data {
                cfg.data_dir = Some(d);
            }
            if let Some(ab) = a.ablation {
                cfg.model.ablation = ab;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            train(&cfg, |s| {
                println!(
                    "epoch {:>4}  loss {:.4} (triplet {:.4}, id {:.4})  lr {:.2e}  grad-norm {:.3}",
                    s.epoch + 1,
                    s.total_loss,
                    s.triplet_loss,
                    s.id_loss,
                    s.lr,
                    s.grad_norm
                )
            })?;
            Ok(Status::Ok)
        }
        Command::Eval(a) => {
            let mut cfg = resolve(&a.common)?;
            if let Some(c) = a.checkpoint {
                cfg.eval.checkpoint = Some(c);
            }
            if let Some(d) = a.data {
                cfg.data_dir = Some(d);
            }
            let m = eval(&cfg)?;
            print!("{}", m.table());
            if m.excluded_queries > 0 {
                println!("{} queries had no valid gallery match and were skipped", m.excluded_queries);
            }
            Ok(Status::Ok)
        }
        Command::Verify(a) => verify(Suite::All, a.out.as_deref(), "verify"),
        Command::Gradcheck(a) => verify(Suite::Gradients, a.out.as_deref(), "gradcheck"),
    }
}

/// Config file, then the environment, then `--out`.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::contract(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(JsonLines {
            path,
            out: BufWriter::new(f),
        })
    }

    fn push(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::contract(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Generates the dataset into [`RunConfig::data_dir`] and writes
/// `census.json` and `synth.resolved.toml` to the output directory.
pub fn synth(cfg: &RunConfig) -> Result<Census> {
    cfg.synth.validate()?;
    let data = generate_synthetic(&cfg.synth)?;
    let mut resolved = cfg.clone();
    resolved.data_dir = Some(cfg.data_dir());
    resolved.write_echo("synth")?;
    save_dataset(&data, &cfg.data_dir())?;
    let census = data.census();
    write_json(&cfg.out_dir.join("census.json"), &census)?;
    Ok(census)
}

/// What a training run leaves behind.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub census: ParamCensus,
    pub epochs: Vec<EpochSummary>,
}

/// Trains on the dataset in [`RunConfig::data_dir`].
///
/// Writes to the output directory: `train.resolved.toml`,
/// `model_census.json`, `batches.jsonl` (per batch, with wall time),
/// `epochs.jsonl` (deterministic per-epoch means), `final.ck`, and
/// `checkpoints/epoch_NNNN.ck` every `checkpoint_every` epochs.
pub fn train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochSummary)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data_dir())?;
    data.validate()?;
    let mut resolved = cfg.clone();
    resolved.data_dir = Some(cfg.data_dir());
    resolved.write_echo("train")?;
    train_on(&resolved, &data, on_epoch)
}

/// [`train`] on an already loaded dataset.
pub fn train_on(cfg: &RunConfig, data: &VideoDataset, mut on_epoch: impl FnMut(&EpochSummary)) -> Result<TrainOutcome> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = cfg.model.build(data.train_identities().len())?;
    let net = Cstnet::new(model, cfg.seed)?;
    let census = net.census();
    write_json(&out.join("model_census.json"), &census)?;
    let mut trainer = Trainer::new(net, data, cfg.train.clone(), cfg.seed)?;
    let mut batches = JsonLines::create(out.join("batches.jsonl"))?;
    let mut epochs = JsonLines::create(out.join("epochs.jsonl"))?;
    let ck_dir = out.join("checkpoints");
    let mut summaries = Vec::new();
    for _ in 0..cfg.train.epochs {
        let mut write_err = Ok(());
        let report = trainer.train_epoch(data, |b| {
            if write_err.is_ok() {
                write_err = batches.push(b);
            }
        })?;
        write_err?;
        epochs.push(&report.summary)?;
        on_epoch(&report.summary);
        if cfg.checkpoint_every > 0 && trainer.epoch % cfg.checkpoint_every == 0 {
            fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
            Checkpoint::from_model(&trainer.net, trainer.epoch, cfg.seed)
                .save(&ck_dir.join(format!("epoch_{:04}.ck", trainer.epoch)))?;
        }
        summaries.push(report.summary);
    }
    batches.finish()?;
    epochs.finish()?;
    Checkpoint::from_model(&trainer.net, trainer.epoch, cfg.seed).save(&out.join("final.ck"))?;
    Ok(TrainOutcome {
        trainer,
        census,
        epochs: summaries,
    })
}

/// Evaluates [`RunConfig::checkpoint`] on [`RunConfig::data_dir`] and writes
/// `metrics.jsonl` and `eval.resolved.toml`.
pub fn eval(cfg: &RunConfig) -> Result<RankingMetrics> {
    if cfg.eval.max_rank == 0 {
        return Err(Error::config("eval.max_rank must be at least 1"));
    }
    let ck_path = cfg.checkpoint();
    let net = Checkpoint::load(&ck_path)?.into_model()?;
    let data = load_dataset(&cfg.data_dir())?;
    data.validate()?;
    let m = &net.cfg;
    if data.frame_shape() != Some([m.in_channels, m.height, m.width]) {
        return Err(Error::contract(format!(
            "checkpoint {} expects {}×{}×{} frames but the dataset has {:?}",
            ck_path.display(),
            m.in_channels,
            m.height,
            m.width,
            data.frame_shape()
        )));
    }
    let mut resolved = cfg.clone();
    resolved.data_dir = Some(cfg.data_dir());
    resolved.eval.checkpoint = Some(ck_path);
    resolved.write_echo("eval")?;
    let metrics = evaluate(&net, &data, cfg.eval.max_rank)?;
    let mut lines = JsonLines::create(cfg.out_dir.join("metrics.jsonl"))?;
    for r in metrics.records() {
        lines.push(&r)?;
    }
    lines.finish()?;
    Ok(metrics)
}

fn verify(suite: Suite, out: Option<&Path>, name: &str) -> Result<Status> {
    let report = run_suite(suite, |r| println!("{}", r.line()));
    let text = report.render();
    println!("{}", text.lines().last().unwrap_or_default());
    let mut cfg = RunConfig::default();
    cfg.apply_env();
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    write_report(&cfg.out_dir, name, &report)?;
    Ok(if report.passed() {
        Status::Ok
    } else {
        Status::VerificationFailed
    })
}

fn write_report(dir: &Path, name: &str, report: &VerifyReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(format!("{name}.json")), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        for args in [
            vec!["cstnet", "synth", "--identities", "16", "--seed", "7"],
            vec!["cstnet", "train", "--ablation", "base", "--epochs", "0", "--out", "x"],
            vec!["cstnet", "eval", "--checkpoint", "a.ck", "--data", "d"],
            vec!["cstnet", "verify"],
            vec!["cstnet", "gradcheck", "--out", "o"],
        ] {
            Cli::try_parse_from(&args).unwrap();
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        assert!(Cli::try_parse_from(["cstnet", "train", "--ablation", "half"]).is_err());
        assert!(Cli::try_parse_from(["cstnet", "fly"]).is_err());
        assert!(Cli::try_parse_from(["cstnet", "synth", "--identities", "-1"]).is_err());
    }

    #[test]
    fn status_codes() {
        assert_eq!(Status::Ok.code(), 0);
        assert_eq!(Status::VerificationFailed.code(), 2);
    }
}
