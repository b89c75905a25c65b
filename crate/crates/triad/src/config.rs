//! Run configuration: one TOML (or JSON) file drives every subcommand.
//! All defaults live here, never as magic constants in the compute paths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossWeights;

/// Independent seed streams so that data, weights and sampling can be varied
/// separately.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub sampling: u64,
    pub encoder: u64,
    pub probe: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 7,
            model: 11,
            sampling: 13,
            encoder: 17,
            probe: 19,
        }
    }
}

/// Feature dimensions: `d` per-frame, `d_t` text base, `d_b` per branch,
/// `d_v` fused visual.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct Dims {
    pub d: usize,
    pub d_t: usize,
    pub d_b: usize,
    pub d_v: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            d: 64,
            d_t: 64,
            d_b: 32,
            d_v: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum_beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            momentum_beta: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

/// Feature bank scheduling and recombination sampling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct BankConfig {
    /// Banks refresh on steps where `step % setting_step == 0`.
    pub setting_step: usize,
    /// Number of triplets sampled from the banks per step (the set M).
    pub recomb_samples: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            setting_step: 50,
            recomb_samples: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct TemporalSettings {
    pub layers: usize,
    pub heads: usize,
    pub max_relative_distance: usize,
}

impl Default for TemporalSettings {
    fn default() -> Self {
        TemporalSettings {
            layers: 2,
            heads: 4,
            max_relative_distance: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrthogonalityMode {
    /// Mean squared pairwise cosine; nonnegative, minimized at orthogonality.
    #[default]
    Squared,
    /// Signed mean with a leading minus, kept for fidelity experiments.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Self-attention over the fused vector as a length-1 sequence.
    #[default]
    Fused,
    /// Ablation: attend over the four pre-fusion tokens, then mean-pool.
    /// Requires `d == d_v`.
    Token,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct Modes {
    pub orthogonality: OrthogonalityMode,
    pub attention: AttentionMode,
    /// Average both InfoNCE directions in the cross-modal loss (default off:
    /// one-directional video-to-text).
    pub symmetric_clip: bool,
    /// Force single-threaded execution everywhere.
    pub deterministic: bool,
    /// Balance batches uniformly over action classes instead of uniformly
    /// over clips.
    pub balanced_batches: bool,
}

impl Default for Modes {
    fn default() -> Self {
        Modes {
            orthogonality: OrthogonalityMode::Squared,
            attention: AttentionMode::Fused,
            symmetric_clip: false,
            deterministic: true,
            balanced_batches: false,
        }
    }
}

/// Frozen-encoder settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct EncoderConfig {
    /// Token embeddings are hashed into this many rows.
    pub vocab_hash_size: usize,
    /// Expected frame height/width; frames are average-pooled to an 8x8 grid.
    pub frame_height: usize,
    pub frame_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_hash_size: 512,
            frame_height: 32,
            frame_width: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding `manifest.jsonl`, `meta.json` and `clips/`.
    pub dataset_dir: String,
    /// Output directory for checkpoints, metrics and reports.
    pub out_dir: String,
    /// Save a checkpoint every this many steps (0 = final only).
    pub checkpoint_interval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset_dir: "data".into(),
            out_dir: "runs/default".into(),
            checkpoint_interval: 0,
        }
    }
}

fn default_sampled_frames() -> usize {
    16
}
fn default_batch_size() -> usize {
    32
}
fn default_steps() -> usize {
    2000
}
fn default_attend_heads() -> usize {
    4
}

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub dims: Dims,
    /// Frames uniformly sampled from each clip (n).
    #[serde(default = "default_sampled_frames")]
    pub sampled_frames: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub bank: BankConfig,
    pub temporal: TemporalSettings,
    /// Heads of the post-fusion self-attention block.
    #[serde(default = "default_attend_heads")]
    pub attend_heads: usize,
    pub encoder: EncoderConfig,
    pub modes: Modes,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: Seeds::default(),
            dims: Dims::default(),
            sampled_frames: default_sampled_frames(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            bank: BankConfig::default(),
            temporal: TemporalSettings::default(),
            attend_heads: default_attend_heads(),
            encoder: EncoderConfig::default(),
            modes: Modes::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML (`.toml`) or JSON (`.json`) config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::Config(format!("{key}: {msg}")));
        if self.sampled_frames < 2 {
            return fail("sampled_frames", "must be at least 2");
        }
        if self.batch_size < 2 {
            return fail("batch_size", "contrastive losses need at least 2 samples");
        }
        if self.steps < 1 {
            return fail("steps", "must be at least 1");
        }
        if self.dims.d % self.temporal.heads != 0 {
            return fail("temporal.heads", "must divide dims.d evenly");
        }
        if self.dims.d_v % self.attend_heads != 0 {
            return fail("attend_heads", "must divide dims.d_v evenly");
        }
        if self.temporal.layers < 1 {
            return fail("temporal.layers", "must be at least 1");
        }
        if self.temporal.max_relative_distance < 1 {
            return fail("temporal.max_relative_distance", "must be at least 1");
        }
        if self.bank.setting_step < 1 {
            return fail("bank.setting_step", "must be at least 1");
        }
        if self.modes.attention == AttentionMode::Token && self.dims.d != self.dims.d_v {
            return fail("modes.attention", "token mode requires dims.d == dims.d_v");
        }
        if self.encoder.frame_height < 8 || self.encoder.frame_width < 8 {
            return fail("encoder.frame_height/width", "must be at least 8");
        }
        self.loss.validate()?;
        Ok(())
    }
}
