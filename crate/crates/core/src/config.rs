//! Architectural hyperparameters and closed-form parameter accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown preset `{0}` (expected one of gemma-2b, gemma-7b, nano)")]
    UnknownPreset(String),
    #[error("{field} must be positive")]
    NotPositive { field: &'static str },
    #[error("n_heads ({n_heads}) is not divisible by n_kv_heads ({n_kv_heads})")]
    HeadsNotDivisible { n_heads: usize, n_kv_heads: usize },
    #[error("n_kv_heads ({n_kv_heads}) exceeds n_heads ({n_heads})")]
    TooManyKvHeads { n_heads: usize, n_kv_heads: usize },
    #[error("feedforward width {0} is odd and cannot split into gate and up branches")]
    OddFeedforward(usize),
    #[error("head_size {0} is odd; rotary embedding rotates coordinate pairs")]
    OddHeadSize(usize),
    #[error("norm_eps must be finite and non-negative, got {0}")]
    BadNormEps(f32),
    #[error("rope_base must be finite and positive, got {0}")]
    BadRopeBase(f64),
}

/// GELU gate used inside the GeGLU feedforward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeluVariant {
    /// tanh approximation.
    #[default]
    Tanh,
    /// Exact Gaussian error function gate.
    Erf,
}

/// How rotary embedding pairs up coordinates within a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RopePairing {
    /// Rotates `(v[2i], v[2i+1])`.
    #[default]
    Adjacent,
}

/// Attention logit scaling applied to queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryScaling {
    /// `1 / sqrt(head_size)`.
    #[default]
    InvSqrtHeadSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    /// Combined gate + up width of the GeGLU feedforward; each branch is half.
    pub ffn_hidden: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_size: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rope_base: f64,
    pub norm_eps: f32,
    /// Multiply token embeddings by `sqrt(d_model)` before the first block.
    pub embed_scale: bool,
    pub gelu: GeluVariant,
    pub rope_pairing: RopePairing,
    pub query_scaling: QueryScaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Gemma2b,
    Gemma7b,
    Nano,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Gemma2b, Preset::Gemma7b, Preset::Nano];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Gemma2b => "gemma-2b",
            Preset::Gemma7b => "gemma-7b",
            Preset::Nano => "nano",
        }
    }

    pub fn config(self) -> ModelConfig {
        let base = ModelConfig {
            d_model: 0,
            n_layers: 0,
            ffn_hidden: 0,
            n_heads: 0,
            n_kv_heads: 0,
            head_size: 0,
            vocab_size: 256_128,
            max_context: 8192,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            embed_scale: true,
            gelu: GeluVariant::Tanh,
            rope_pairing: RopePairing::Adjacent,
            query_scaling: QueryScaling::InvSqrtHeadSize,
        };
        match self {
            Preset::Gemma2b => ModelConfig {
                d_model: 2048,
                n_layers: 18,
                ffn_hidden: 32_768,
                n_heads: 8,
                n_kv_heads: 1,
                head_size: 256,
                ..base
            },
            Preset::Gemma7b => ModelConfig {
                d_model: 3072,
                n_layers: 28,
                ffn_hidden: 49_152,
                n_heads: 16,
                n_kv_heads: 16,
                head_size: 256,
                ..base
            },
            Preset::Nano => ModelConfig {
                d_model: 64,
                n_layers: 4,
                ffn_hidden: 256,
                n_heads: 4,
                n_kv_heads: 1,
                head_size: 16,
                vocab_size: 512,
                max_context: 128,
                ..base
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ConfigError::UnknownPreset(s.to_string()))
    }
}

/// Looks up a named preset configuration.
pub fn preset(name: &str) -> Result<ModelConfig, ConfigError> {
    name.parse::<Preset>().map(Preset::config)
}

impl ModelConfig {
    /// Checks every structural invariant, returning the config unchanged on success.
    pub fn validate(self) -> Result<Self, ConfigError> {
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_size", self.head_size),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ConfigError::NotPositive { field });
            }
        }
        if self.n_kv_heads > self.n_heads {
            return Err(ConfigError::TooManyKvHeads {
                n_heads: self.n_heads,
                n_kv_heads: self.n_kv_heads,
            });
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(ConfigError::HeadsNotDivisible {
                n_heads: self.n_heads,
                n_kv_heads: self.n_kv_heads,
            });
        }
        if !self.ffn_hidden.is_multiple_of(2) {
            return Err(ConfigError::OddFeedforward(self.ffn_hidden));
        }
        if !self.head_size.is_multiple_of(2) {
            return Err(ConfigError::OddHeadSize(self.head_size));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(ConfigError::BadNormEps(self.norm_eps));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(ConfigError::BadRopeBase(self.rope_base));
        }
        Ok(())
    }

    /// Width of one GeGLU branch.
    pub fn ffn_branch(&self) -> usize {
        self.ffn_hidden / 2
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_size
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_size
    }

    /// Number of query heads served by each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Key/value head read by query head `head` (contiguous blocks).
    pub fn kv_group(&self, head: usize) -> usize {
        head * self.n_kv_heads / self.n_heads
    }

    pub fn query_scale(&self) -> f32 {
        match self.query_scaling {
            QueryScaling::InvSqrtHeadSize => 1.0 / (self.head_size as f32).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub embedding: u64,
    pub non_embedding: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.embedding + self.non_embedding
    }
}

/// Closed-form parameter count for a bias-free, tied-embedding decoder with
/// two RMSNorm gains per block and one final norm.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts, ConfigError> {
    cfg.check()?;
    let d = cfg.d_model as u64;
    let q = cfg.q_width() as u64;
    let kv = cfg.kv_width() as u64;
    let ffn = cfg.ffn_hidden as u64;

    let attn = 2 * d * q + 2 * d * kv;
    // gate and up are ffn/2 wide each, plus the down projection: 3 * d * ffn / 2
    let mlp = 3 * d * ffn / 2;
    let norms = 2 * d;
    let per_block = attn + mlp + norms;

    Ok(ParamCounts {
        embedding: cfg.vocab_size as u64 * d,
        non_embedding: cfg.n_layers as u64 * per_block + d,
    })
}
