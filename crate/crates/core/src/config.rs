//! Run configuration and its stable fingerprint.
//!
//! The fingerprint covers every field that changes model behavior (numeric
//! settings, flags, backbone choice, synthesis knobs) and deliberately skips
//! filesystem paths, so a checkpoint stays loadable when a dataset moves.

use crate::error::{Error, Result};
use crate::synthesis::SynthesisConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Small seeded 4-stage trunk for tests and smoke experiments.
    Toy,
    /// WideResNet50 widths; requires an externally converted weight bundle.
    PretrainedWideresnet50,
}

/// Ablation switches, one per studied component. All independent; defaults
/// are the full method.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Inner pyramid path (top-down for normality, bottom-up for abnormality).
    pub pmn_inner: bool,
    /// Outer pyramid path (the opposite directions).
    pub pmn_outer: bool,
    /// Foreground-aware synthesis; off means defects may land anywhere.
    pub fas: bool,
    /// Pyramid upsampling of the stage anomaly maps.
    pub pu: bool,
    /// Multi-perception fusion; off means plain channel mean.
    pub mm: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            pmn_inner: true,
            pmn_outer: true,
            fas: true,
            pu: true,
            mm: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneKind,
    pub input_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset_root: String,
    pub category: String,
    pub fpr_limit: f64,
    pub ablation: AblationFlags,
    pub synthesis: SynthesisConfig,
    /// Student trunk weights train by default; freezing leaves only the
    /// decouple layers and pyramid network learnable.
    pub trunk_trainable: bool,
    /// Pixels averaged for the image score.
    pub score_top_k: usize,
    /// Apply a second sigmoid to the fused map before scoring.
    pub score_extra_sigmoid: bool,
    pub loss_weight_ngm: f64,
    pub loss_weight_aim: f64,
    /// Optional converted weight bundle for the pretrained backbone.
    pub weights_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneKind::Toy,
            input_size: 256,
            epochs: 100,
            lr: 0.005,
            batch_size: 8,
            seed: 0,
            dataset_root: String::new(),
            category: String::new(),
            fpr_limit: 0.3,
            ablation: AblationFlags::default(),
            synthesis: SynthesisConfig::default(),
            trunk_trainable: true,
            score_top_k: 100,
            score_extra_sigmoid: false,
            loss_weight_ngm: 1.0,
            loss_weight_aim: 1.0,
            weights_path: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(Error::Config(format!(
                "fpr_limit must lie in (0,1], got {}",
                self.fpr_limit
            )));
        }
        if self.score_top_k == 0 {
            return Err(Error::Config("score_top_k must be >= 1".into()));
        }
        if self.loss_weight_ngm < 0.0 || self.loss_weight_aim < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        self.synthesis.validate()
    }

    /// Stable hash of the behavior-relevant configuration. Field values are
    /// serialized as labeled text in a fixed order; paths are excluded.
    pub fn fingerprint(&self) -> String {
        let a = &self.ablation;
        let s = &self.synthesis;
        let freqs: Vec<String> = s.freq_choices.iter().map(|f| f.to_string()).collect();
        let canonical = format!(
            "backbone={:?};input={};epochs={};lr={};batch={};seed={};fpr={};\
             pmn_inner={};pmn_outer={};fas={};pu={};mm={};\
             beta=[{},{}];thr={};freqs=[{}];fg={:?};tau={};\
             trunk={};topk={};extra_sigmoid={};w_ngm={};w_aim={}",
            self.backbone,
            self.input_size,
            self.epochs,
            self.lr,
            self.batch_size,
            self.seed,
            self.fpr_limit,
            a.pmn_inner,
            a.pmn_outer,
            a.fas,
            a.pu,
            a.mm,
            s.beta_lo,
            s.beta_hi,
            s.noise_threshold,
            freqs.join(","),
            s.foreground_mode,
            s.foreground.tau,
            self.trunk_trainable,
            self.score_top_k,
            self.score_extra_sigmoid,
            self.loss_weight_ngm,
            self.loss_weight_aim,
        );
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        crate::nn::hex_encode(&hasher.finalize()[..16])
    }
}
