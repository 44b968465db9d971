//! Experiment configuration: a strict TOML schema covering every stage
//! of the pipeline, cross-section validation, and embedded named
//! presets.
//!
//! Unknown keys are rejected at every nesting level so a typo fails the
//! load instead of silently running with a default.

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticCorpusSpec;
use crate::error::{CoreError, Result};
use crate::frontend::FrontendConfig;
use crate::graph::Precision;
use crate::losses::{JointFinetuneWeights, JointSslWeights};
use crate::model::{DecoderConfig, EncoderConfig};
use crate::optim::WarmupSchedule;

/// Names accepted by [`load_config`] in place of a file path.
pub const PRESET_NAMES: [&str; 3] = ["desk-tiny", "desk-small", "full-360h"];

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub frontend: FrontendSection,
    pub kmeans: KmeansSection,
    pub mask: MaskSection,
    pub encoder: EncoderConfig,
    pub decoder: DecoderSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

/// Waveform frontend plus the synthetic corpus it consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendSection {
    pub sample_rate: u32,
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub n_utterances: usize,
    pub duration_range: (f64, f64),
    pub n_latent_phones: usize,
}

impl FrontendSection {
    pub fn frontend_config(&self) -> FrontendConfig {
        FrontendConfig {
            sample_rate: self.sample_rate,
            channels: self.channels,
            kernels: self.kernels.clone(),
            strides: self.strides.clone(),
        }
    }

    pub fn corpus_spec(&self, seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            n_utterances: self.n_utterances,
            duration_range: self.duration_range,
            n_latent_phones: self.n_latent_phones,
            sample_rate: self.sample_rate,
            seed,
        }
    }
}

/// Unit discovery. `feature_layer` 0 clusters frontend features;
/// `1..=n_layers` clusters the named encoder layer's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansSection {
    pub k: usize,
    pub max_iters: usize,
    pub feature_layer: usize,
}

/// Span masking of encoder input frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub selection_prob: f64,
    pub span_length: usize,
}

/// Decoder shape. `d_model` defaults to the encoder width and must
/// match it when given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub d_model: Option<usize>,
    pub d_ff: usize,
    pub dropout: f64,
}

impl DecoderSection {
    pub fn decoder_config(&self, encoder_d_model: usize) -> DecoderConfig {
        DecoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model.unwrap_or(encoder_d_model),
            d_ff: self.d_ff,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: u64,
    /// Max total frames per batch.
    pub batch_frames: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub alpha: f64,
    pub label_smoothing: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: u64,
    pub batch_frames: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta: f64,
    pub label_smoothing: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

/// Decoding and scoring. `holdout_utts` 0 evaluates on the training
/// set; otherwise the last N utterances form the held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub beam_size: usize,
    pub max_len: usize,
    pub holdout_utts: usize,
}

fn positive(what: &str, v: u64) -> Result<()> {
    if v == 0 {
        return Err(CoreError::Config(format!("{} must be positive", what)));
    }
    Ok(())
}

fn check_rate(what: &str, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(CoreError::Config(format!("{} {} not a positive finite rate", what, lr)));
    }
    Ok(())
}

fn check_smoothing(what: &str, eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(CoreError::Config(format!("{} {} outside [0,1)", what, eps)));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Validates every section and their cross-references.
    pub fn validate(&self) -> Result<()> {
        self.frontend.frontend_config().validate()?;
        self.frontend.corpus_spec(self.seed).validate()?;

        positive("kmeans.k", self.kmeans.k as u64)?;
        positive("kmeans.max_iters", self.kmeans.max_iters as u64)?;
        if self.kmeans.feature_layer > self.encoder.n_layers {
            return Err(CoreError::Config(format!(
                "kmeans.feature_layer {} exceeds encoder n_layers {}",
                self.kmeans.feature_layer, self.encoder.n_layers
            )));
        }

        if !(self.mask.selection_prob > 0.0 && self.mask.selection_prob < 1.0) {
            return Err(CoreError::Config(format!(
                "mask.selection_prob {} outside (0,1)",
                self.mask.selection_prob
            )));
        }
        positive("mask.span_length", self.mask.span_length as u64)?;

        self.encoder.validate()?;
        self.decoder.decoder_config(self.encoder.d_model).validate(self.encoder.d_model)?;

        positive("pretrain.steps", self.pretrain.steps)?;
        positive("pretrain.batch_frames", self.pretrain.batch_frames as u64)?;
        check_rate("pretrain.lr", self.pretrain.lr)?;
        JointSslWeights::new(self.pretrain.alpha)?;
        check_smoothing("pretrain.label_smoothing", self.pretrain.label_smoothing)?;
        positive("pretrain.checkpoint_every", self.pretrain.checkpoint_every)?;
        positive("pretrain.log_every", self.pretrain.log_every)?;
        WarmupSchedule::new(self.pretrain.lr, self.pretrain.warmup_steps)?;

        positive("finetune.steps", self.finetune.steps)?;
        positive("finetune.batch_frames", self.finetune.batch_frames as u64)?;
        check_rate("finetune.lr", self.finetune.lr)?;
        JointFinetuneWeights::new(self.finetune.beta)?;
        check_smoothing("finetune.label_smoothing", self.finetune.label_smoothing)?;
        positive("finetune.checkpoint_every", self.finetune.checkpoint_every)?;
        positive("finetune.log_every", self.finetune.log_every)?;
        WarmupSchedule::new(self.finetune.lr, self.finetune.warmup_steps)?;

        positive("eval.beam_size", self.eval.beam_size as u64)?;
        positive("eval.max_len", self.eval.max_len as u64)?;
        if self.frontend.n_utterances > 0 && self.eval.holdout_utts >= self.frontend.n_utterances {
            return Err(CoreError::Config(format!(
                "eval.holdout_utts {} leaves no training utterances out of {}",
                self.eval.holdout_utts, self.frontend.n_utterances
            )));
        }
        Ok(())
    }
}

/// Parses and validates a TOML document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| CoreError::Config(format!("config parse: {}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Returns the embedded TOML for a named preset.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "desk-tiny" => Some(include_str!("../presets/desk-tiny.toml")),
        "desk-small" => Some(include_str!("../presets/desk-small.toml")),
        "full-360h" => Some(include_str!("../presets/full-360h.toml")),
        _ => None,
    }
}

/// Loads a config from a preset name or a filesystem path.
pub fn load_config(arg: &str) -> Result<ExperimentConfig> {
    if let Some(text) = preset(arg) {
        return parse_config(text);
    }
    let text = std::fs::read_to_string(arg)?;
    parse_config(&text)
}
