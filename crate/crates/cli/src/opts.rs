//! Command-line surface and configuration resolution.
//!
//! Precedence, lowest to highest: built-in defaults, the TOML config file,
//! the `DMDD_DATASET_ROOT` environment variable, command-line flags. The
//! resulting [`RunConfig`] is validated before any command touches disk.

use clap::{Args, Parser, Subcommand};
use dmdd_core::config::{BackboneKind, RunConfig};
use dmdd_core::error::{Error, Result};
use dmdd_core::synthesis::ForegroundMode;
use serde::Deserialize;
use std::path::PathBuf;

pub const DATASET_ROOT_ENV: &str = "DMDD_DATASET_ROOT";

#[derive(Parser)]
#[command(
    name = "dmdd",
    version,
    about = "Anomaly detection via decoupled student-teacher distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Train a detector for one category (or all categories).
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and emit a JSON report.
    Eval(EvalArgs),
    /// Score images with a checkpoint: anomaly maps, heatmaps, scores.
    Infer(InferArgs),
    /// Write synthesized-anomaly preview triptychs.
    Synth(SynthArgs),
    /// Generate the seeded toy-shapes dataset.
    MakeToyDataset(ToyArgs),
}

/// Flags shared by every subcommand. Each maps onto one config field; an
/// unset flag leaves the file/default value in place.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat TOML config file; flags override its values.
    #[arg(long, global = false)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset_root: Option<String>,
    #[arg(long)]
    pub category: Option<String>,
    /// "toy" or "pretrained-wideresnet50".
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fpr_limit: Option<f64>,
    #[arg(long)]
    pub pmn_inner: Option<bool>,
    #[arg(long)]
    pub pmn_outer: Option<bool>,
    #[arg(long)]
    pub fas: Option<bool>,
    #[arg(long)]
    pub pu: Option<bool>,
    #[arg(long)]
    pub mm: Option<bool>,
    #[arg(long)]
    pub trunk_trainable: Option<bool>,
    #[arg(long)]
    pub score_top_k: Option<usize>,
    #[arg(long)]
    pub score_extra_sigmoid: Option<bool>,
    #[arg(long)]
    pub loss_weight_ngm: Option<f64>,
    #[arg(long)]
    pub loss_weight_aim: Option<f64>,
    #[arg(long)]
    pub beta_lo: Option<f64>,
    #[arg(long)]
    pub beta_hi: Option<f64>,
    #[arg(long)]
    pub noise_threshold: Option<f64>,
    /// Comma-separated Perlin periods, e.g. "2,4,8".
    #[arg(long, value_delimiter = ',')]
    pub freq_choices: Option<Vec<usize>>,
    /// "self" or a directory of texture images.
    #[arg(long)]
    pub texture_source: Option<String>,
    /// "auto" or "full".
    #[arg(long)]
    pub foreground_mode: Option<String>,
    #[arg(long)]
    pub foreground_tau: Option<f64>,
    #[arg(long)]
    pub weights_path: Option<String>,
}

/// The config file mirrors the flags: one flat table, every key optional.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dataset_root: Option<String>,
    category: Option<String>,
    backbone: Option<String>,
    input_size: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    fpr_limit: Option<f64>,
    pmn_inner: Option<bool>,
    pmn_outer: Option<bool>,
    fas: Option<bool>,
    pu: Option<bool>,
    mm: Option<bool>,
    trunk_trainable: Option<bool>,
    score_top_k: Option<usize>,
    score_extra_sigmoid: Option<bool>,
    loss_weight_ngm: Option<f64>,
    loss_weight_aim: Option<f64>,
    beta_lo: Option<f64>,
    beta_hi: Option<f64>,
    noise_threshold: Option<f64>,
    freq_choices: Option<Vec<usize>>,
    texture_source: Option<String>,
    foreground_mode: Option<String>,
    foreground_tau: Option<f64>,
    weights_path: Option<String>,
}

fn parse_backbone(s: &str) -> Result<BackboneKind> {
    match s {
        "toy" => Ok(BackboneKind::Toy),
        "pretrained-wideresnet50" => Ok(BackboneKind::PretrainedWideresnet50),
        other => Err(Error::Config(format!(
            "unknown backbone {other:?} (expected \"toy\" or \"pretrained-wideresnet50\")"
        ))),
    }
}

fn parse_foreground_mode(s: &str) -> Result<ForegroundMode> {
    match s {
        "auto" => Ok(ForegroundMode::Auto),
        "full" => Ok(ForegroundMode::Full),
        other => Err(Error::Config(format!(
            "unknown foreground mode {other:?} (expected \"auto\" or \"full\")"
        ))),
    }
}

macro_rules! take {
    ($src:expr, $dst:expr) => {
        if let Some(v) = &$src {
            $dst = v.clone();
        }
    };
}

impl FileConfig {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        take!(self.dataset_root, cfg.dataset_root);
        take!(self.category, cfg.category);
        if let Some(b) = &self.backbone {
            cfg.backbone = parse_backbone(b)?;
        }
        take!(self.input_size, cfg.input_size);
        take!(self.epochs, cfg.epochs);
        take!(self.lr, cfg.lr);
        take!(self.batch_size, cfg.batch_size);
        take!(self.seed, cfg.seed);
        take!(self.fpr_limit, cfg.fpr_limit);
        take!(self.pmn_inner, cfg.ablation.pmn_inner);
        take!(self.pmn_outer, cfg.ablation.pmn_outer);
        take!(self.fas, cfg.ablation.fas);
        take!(self.pu, cfg.ablation.pu);
        take!(self.mm, cfg.ablation.mm);
        take!(self.trunk_trainable, cfg.trunk_trainable);
        take!(self.score_top_k, cfg.score_top_k);
        take!(self.score_extra_sigmoid, cfg.score_extra_sigmoid);
        take!(self.loss_weight_ngm, cfg.loss_weight_ngm);
        take!(self.loss_weight_aim, cfg.loss_weight_aim);
        take!(self.beta_lo, cfg.synthesis.beta_lo);
        take!(self.beta_hi, cfg.synthesis.beta_hi);
        take!(self.noise_threshold, cfg.synthesis.noise_threshold);
        take!(self.freq_choices, cfg.synthesis.freq_choices);
        take!(self.texture_source, cfg.synthesis.texture_source);
        if let Some(m) = &self.foreground_mode {
            cfg.synthesis.foreground_mode = parse_foreground_mode(m)?;
        }
        take!(self.foreground_tau, cfg.synthesis.foreground.tau);
        if let Some(p) = &self.weights_path {
            cfg.weights_path = Some(p.clone());
        }
        Ok(())
    }
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        take!(self.dataset_root, cfg.dataset_root);
        take!(self.category, cfg.category);
        if let Some(b) = &self.backbone {
            cfg.backbone = parse_backbone(b)?;
        }
        take!(self.input_size, cfg.input_size);
        take!(self.epochs, cfg.epochs);
        take!(self.lr, cfg.lr);
        take!(self.batch_size, cfg.batch_size);
        take!(self.seed, cfg.seed);
        take!(self.fpr_limit, cfg.fpr_limit);
        take!(self.pmn_inner, cfg.ablation.pmn_inner);
        take!(self.pmn_outer, cfg.ablation.pmn_outer);
        take!(self.fas, cfg.ablation.fas);
        take!(self.pu, cfg.ablation.pu);
        take!(self.mm, cfg.ablation.mm);
        take!(self.trunk_trainable, cfg.trunk_trainable);
        take!(self.score_top_k, cfg.score_top_k);
        take!(self.score_extra_sigmoid, cfg.score_extra_sigmoid);
        take!(self.loss_weight_ngm, cfg.loss_weight_ngm);
        take!(self.loss_weight_aim, cfg.loss_weight_aim);
        take!(self.beta_lo, cfg.synthesis.beta_lo);
        take!(self.beta_hi, cfg.synthesis.beta_hi);
        take!(self.noise_threshold, cfg.synthesis.noise_threshold);
        take!(self.freq_choices, cfg.synthesis.freq_choices);
        take!(self.texture_source, cfg.synthesis.texture_source);
        if let Some(m) = &self.foreground_mode {
            cfg.synthesis.foreground_mode = parse_foreground_mode(m)?;
        }
        take!(self.foreground_tau, cfg.synthesis.foreground.tau);
        if let Some(p) = &self.weights_path {
            cfg.weights_path = Some(p.clone());
        }
        Ok(())
    }

    /// Defaults -> file -> environment -> flags, then validation.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: FileConfig = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            file.apply(&mut cfg)?;
        }
        if let Ok(root) = std::env::var(DATASET_ROOT_ENV) {
            if !root.is_empty() {
                cfg.dataset_root = root;
            }
        }
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config_args: ConfigArgs,
    /// Output directory for checkpoints and the step log.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Train every category under the dataset root sequentially.
    #[arg(long)]
    pub all_categories: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config_args: ConfigArgs,
    /// Checkpoint to evaluate. With --all-categories this is the run root
    /// containing <category>/best.ckpt.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accept a checkpoint whose config fingerprint does not match.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub all_categories: bool,
}

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub config_args: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for maps, heatmaps, and scores.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config_args: ConfigArgs,
    /// Number of triptychs to write.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ToyArgs {
    #[command(flatten)]
    pub config_args: ConfigArgs,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 40)]
    pub train_normal: usize,
    #[arg(long, default_value_t = 10)]
    pub test_normal: usize,
    #[arg(long, default_value_t = 20)]
    pub test_defect: usize,
}
