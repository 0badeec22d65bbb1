//! Per-language transformer encoder and decoder stacks.
//!
//! Every language owns one [`LanguageModules`]: an encoder, a decoder and the
//! parameter store both draw from. Forward passes are recorded on a
//! [`Graph`], which can bind modules of two different languages so any
//! encoder can feed any decoder.

mod forward;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{
    encode, greedy_translate, next_token_logits, teacher_forced_logits, teacher_forced_loss,
    Graph, Hypothesis,
};
pub use model::{DecoderModule, EncoderModule, LanguageModules, Role};

/// Where layer normalization sits relative to each residual connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `norm(x + sublayer(x))`.
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// One embedding table shared by the language's encoder and decoder.
    pub tied_embeddings: bool,
    /// The decoder output projection reuses the decoder embedding table.
    pub tie_output_projection: bool,
    pub norm: NormPlacement,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl TransformerConfig {
    /// Small enough to train synthetic languages on a CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            dropout: 0.1,
            max_positions: 256,
            vocab_size,
            tied_embeddings: true,
            tie_output_projection: true,
            norm: NormPlacement::Post,
        }
    }

    /// The full-size language-specific setting.
    pub fn base(vocab_size: usize) -> Self {
        TransformerConfig {
            layers: 6,
            heads: 8,
            model_dim: 512,
            ffn_dim: 2048,
            dropout: 0.3,
            max_positions: 1024,
            vocab_size,
            tied_embeddings: true,
            tie_output_projection: true,
            norm: NormPlacement::Post,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return fail("layers, heads, model_dim and ffn_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_positions < 2 {
            return fail("max_positions must be at least 2".into());
        }
        if self.vocab_size <= 4 {
            return fail(format!(
                "vocab_size {} leaves no room beyond the reserved ids",
                self.vocab_size
            ));
        }
        Ok(())
    }

    /// Whether an encoder built with `self` can feed a decoder built with
    /// `other`: everything but the vocabulary must agree.
    pub fn interchangeable_with(&self, other: &TransformerConfig) -> bool {
        self.layers == other.layers
            && self.heads == other.heads
            && self.model_dim == other.model_dim
            && self.ffn_dim == other.ffn_dim
            && self.max_positions == other.max_positions
            && self.norm == other.norm
    }
}
