//! Model and run configuration.
//!
//! `RunConfig` is the JSON document accepted by the CLI. Unknown keys are
//! rejected so typos fail loudly instead of silently using defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Longest window the encoder accepts, in 10 ms mel frames.
    pub max_window_frames: usize,
    /// Temporal downsampling factor of the patch embedding.
    pub time_patch: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 256,
            max_window_frames: 1008,
            time_patch: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".to_string()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "encoder d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.time_patch == 0 || self.max_window_frames % self.time_patch != 0 {
            return Err(Error::Config(format!(
                "max_window_frames {} must be divisible by time_patch {}",
                self.max_window_frames, self.time_patch
            )));
        }
        Ok(())
    }

    /// Patch positions available per window.
    pub fn max_positions(&self) -> usize {
        self.max_window_frames / self.time_patch
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    /// Frame features stacked per audio token (25 Hz -> 5 Hz).
    pub stack_factor: usize,
    /// MLP hidden width; defaults to 2 * decoder d_model when absent.
    pub hidden_dim: Option<usize>,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            stack_factor: 5,
            hidden_dim: None,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stack_factor == 0 {
            return Err(Error::Config("stack_factor must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn hidden(&self, decoder_dim: usize) -> usize {
        self.hidden_dim.unwrap_or(2 * decoder_dim)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    /// Longest embedded sequence (audio tokens + text) supported.
    pub max_seq: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 256,
            vocab: 259,
            max_seq: 512,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.ff_dim == 0 || self.vocab == 0 {
            return Err(Error::Config("decoder dims must be positive".to_string()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "decoder d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::Config("max_seq must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate()?;
        self.decoder.validate()
    }
}

/// Per-stage hyperparameter overrides; anything left `null` falls back to
/// the stage's defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub peak_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub total_steps: Option<usize>,
    pub dataset_size: Option<usize>,
    /// "asr_like" or "caption_like"; align-stage data defaults to captions.
    pub task: Option<String>,
    /// Required for pretrain/sft (stage chaining); may be set by --init.
    pub init_checkpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub durations_s: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub out_tokens: usize,
    pub reps: usize,
    pub warmups: usize,
    pub rounds: usize,
    pub prompt: String,
    /// Simulated memory budget for the throughput suite; exceeding it
    /// reports an OOM status row.
    pub mem_cap_mb: Option<u64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            durations_s: vec![5.0, 10.0, 30.0],
            batch_sizes: vec![1, 4, 8],
            out_tokens: 100,
            reps: 7,
            warmups: 2,
            rounds: 3,
            prompt: "caption:".to_string(),
            mem_cap_mb: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stage: StageSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Self::from_json(&text)
    }
}
