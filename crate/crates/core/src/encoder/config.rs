//! Encoder architecture configuration, model presets, and closed-form
//! parameter accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

/// Full architectural description of one encoder variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub feedforward_size: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Embedding width `E <= H`; the embedding is factorized through an
    /// `E x H` projection whenever `E < H`.
    pub embedding_size: usize,
    /// Reuse one layer block's weights across all layers.
    pub share_layer_parameters: bool,
    pub dropout_p: f64,
    pub activation: Activation,
    /// Post-norm (original convention) when false; pre-norm when true.
    pub pre_norm: bool,
    /// Whether pretraining pairs sentences for the next-sentence objective.
    pub nsp_enabled: bool,
    /// Whether pretraining re-samples token corruption every epoch.
    pub dynamic_masking: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.hidden_size == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.embedding_size == 0 || self.embedding_size > self.hidden_size {
            return Err(Error::Config(format!(
                "embedding_size {} outside 1..={}",
                self.embedding_size, self.hidden_size
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.feedforward_size == 0 {
            return Err(Error::Config("zero-sized dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn factorized(&self) -> bool {
        self.embedding_size < self.hidden_size
    }

    pub fn with_vocab_size(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }
}

/// The model presets of the comparison matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    BertBase,
    BertLarge,
    AlbertBase,
    DistilbertBase,
    RobertaBase,
    RobertaLarge,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::BertBase,
        Preset::BertLarge,
        Preset::AlbertBase,
        Preset::DistilbertBase,
        Preset::RobertaBase,
        Preset::RobertaLarge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BertBase => "bert_base",
            Preset::BertLarge => "bert_large",
            Preset::AlbertBase => "albert_base",
            Preset::DistilbertBase => "distilbert_base",
            Preset::RobertaBase => "roberta_base",
            Preset::RobertaLarge => "roberta_large",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset '{s}' (expected one of: {})",
                    Preset::ALL.map(|p| p.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Published dimensions (`Full`) or a desk-scale shrink (`Tiny`) that keeps
/// each variant's structural ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Tiny,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "tiny" => Ok(Scale::Tiny),
            other => Err(Error::Config(format!("unknown scale '{other}' (tiny|full)"))),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scale::Full => write!(f, "full"),
            Scale::Tiny => write!(f, "tiny"),
        }
    }
}

const FULL_VOCAB: usize = 30_522;
const ROBERTA_VOCAB: usize = 50_265;
const FULL_MAX_LEN: usize = 512;
const TINY_VOCAB: usize = 8_192;

/// Returns the architecture for a named preset at the given scale.
///
/// Tiny configs shrink every variant onto the same grid (base models:
/// 2 layers, hidden 64, 2 heads, feed-forward 256) while preserving what
/// distinguishes it: DistilBERT keeps half the base depth, the large models
/// keep double depth and a wider hidden size, ALBERT keeps parameter sharing
/// and a narrow factorized embedding, RoBERTa drops the next-sentence
/// objective, masks dynamically, and allows longer inputs.
pub fn preset(name: Preset, scale: Scale) -> EncoderConfig {
    let mut cfg = match scale {
        Scale::Full => EncoderConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            feedforward_size: 3072,
            vocab_size: FULL_VOCAB,
            max_len: FULL_MAX_LEN,
            embedding_size: 768,
            share_layer_parameters: false,
            dropout_p: 0.1,
            activation: Activation::Gelu,
            pre_norm: false,
            nsp_enabled: true,
            dynamic_masking: false,
        },
        Scale::Tiny => EncoderConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 2,
            feedforward_size: 256,
            vocab_size: TINY_VOCAB,
            max_len: 64,
            embedding_size: 64,
            share_layer_parameters: false,
            dropout_p: 0.1,
            activation: Activation::Gelu,
            pre_norm: false,
            nsp_enabled: true,
            dynamic_masking: false,
        },
    };
    match (name, scale) {
        (Preset::BertBase, _) => {}
        (Preset::BertLarge, Scale::Full) | (Preset::RobertaLarge, Scale::Full) => {
            cfg.num_layers = 24;
            cfg.hidden_size = 1024;
            cfg.num_heads = 16;
            cfg.feedforward_size = 4096;
            cfg.embedding_size = 1024;
        }
        (Preset::BertLarge, Scale::Tiny) | (Preset::RobertaLarge, Scale::Tiny) => {
            cfg.num_layers = 4;
            cfg.hidden_size = 128;
            cfg.num_heads = 4;
            cfg.feedforward_size = 512;
            cfg.embedding_size = 128;
        }
        (Preset::AlbertBase, Scale::Full) => {
            cfg.share_layer_parameters = true;
            cfg.embedding_size = 128;
        }
        (Preset::AlbertBase, Scale::Tiny) => {
            cfg.share_layer_parameters = true;
            cfg.embedding_size = 32;
        }
        (Preset::DistilbertBase, Scale::Full) => {
            cfg.num_layers = 6;
        }
        (Preset::DistilbertBase, Scale::Tiny) => {
            cfg.num_layers = 1;
        }
        (Preset::RobertaBase, _) => {}
    }
    if matches!(name, Preset::RobertaBase | Preset::RobertaLarge) {
        cfg.nsp_enabled = false;
        cfg.dynamic_masking = true;
        match scale {
            Scale::Full => cfg.vocab_size = ROBERTA_VOCAB,
            Scale::Tiny => cfg.max_len = 128, // longer sequences at desk scale
        }
    }
    cfg
}

/// Closed-form count of all trainable encoder scalars.
///
/// Shared layers count one block's weights once; a factorized embedding
/// counts `V*E + E*H` (plus the projection bias) instead of `V*H`.
pub fn count_parameters(config: &EncoderConfig) -> u64 {
    let h = config.hidden_size as u64;
    let f = config.feedforward_size as u64;
    let v = config.vocab_size as u64;
    let e = config.embedding_size as u64;
    let max_len = config.max_len as u64;

    let embeddings = v * e        // token
        + max_len * e             // position
        + 2 * e                   // segment
        + 2 * e;                  // embedding layer norm
    let projection = if config.factorized() { e * h + h } else { 0 };
    let per_layer = 4 * (h * h + h)  // query/key/value/output projections
        + 2 * h                      // attention layer norm
        + (h * f + f)                // feed-forward inner
        + (f * h + h)                // feed-forward outer
        + 2 * h;                     // feed-forward layer norm
    let layer_blocks = if config.share_layer_parameters {
        1
    } else {
        config.num_layers as u64
    };
    embeddings + projection + per_layer * layer_blocks
}
