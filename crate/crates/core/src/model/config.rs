use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of the frozen encoder plus its adapters and heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub bottleneck: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Width of an optional hidden layer in each classifier head.
    #[serde(default)]
    pub classifier_hidden: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden_size: 32,
            num_blocks: 2,
            num_heads: 2,
            ffn_size: 64,
            max_seq_len: 16,
            bottleneck: 4,
            num_classes: 2,
            seed: 0,
            classifier_hidden: None,
        }
    }
}

impl EncoderConfig {
    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.vocab_size < 4 {
            out.push(format!("vocab_size must be >= 4 (3 reserved ids), got {}", self.vocab_size));
        }
        if self.hidden_size == 0 {
            out.push("hidden_size must be positive".into());
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads.max(1) != 0 {
            out.push(format!(
                "hidden_size {} must be divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            out.push("num_blocks must be positive".into());
        }
        if self.ffn_size == 0 {
            out.push("ffn_size must be positive".into());
        }
        if self.max_seq_len == 0 {
            out.push("max_seq_len must be positive".into());
        }
        if self.bottleneck == 0 || self.bottleneck >= self.hidden_size {
            out.push(format!(
                "bottleneck must satisfy 1 <= r < hidden_size, got r={} h={}",
                self.bottleneck, self.hidden_size
            ));
        }
        if self.num_classes < 2 {
            out.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.classifier_hidden == Some(0) {
            out.push("classifier_hidden must be positive when set".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::ModelConfig(v.join("; ")))
        }
    }

    /// Adapter insertion points: one after attention and one after the FFN in each block.
    pub fn insertion_points(&self) -> usize {
        2 * self.num_blocks
    }
}

/// How token states are reduced to one vector per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    #[serde(alias = "mean")]
    MeanPool,
    #[serde(alias = "cls")]
    ClsToken,
}
