use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes of every transformer stack and sequence limit in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Layers in the text encoder, the image encoder and the co-attention interactor.
    pub n_layers: usize,
    pub hidden_text: usize,
    pub hidden_image: usize,
    pub n_heads_text: usize,
    pub n_heads_image: usize,
    /// Feed-forward width as a multiple of the stream's hidden size.
    pub ffn_multiplier: usize,
    /// Attention heads of the structure aggregation module.
    pub agg_heads: usize,
    /// Maximum title length in tokens.
    pub m_text: usize,
    /// Maximum number of objects per image.
    pub m_obj: usize,
    /// Maximum knowledge-text length in tokens.
    pub m_know: usize,
    /// Standard deviation of the truncated-normal weight init.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Laptop-sized defaults.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            hidden_text: 64,
            hidden_image: 96,
            n_heads_text: 4,
            n_heads_image: 4,
            ffn_multiplier: 4,
            agg_heads: 4,
            m_text: 16,
            m_obj: 8,
            m_know: 24,
            init_std: 0.02,
        }
    }

    /// Full-size model (6 layers, 768/1024 hidden). Never needed by tests.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 6,
            hidden_text: 768,
            hidden_image: 1024,
            n_heads_text: 12,
            n_heads_image: 8,
            ffn_multiplier: 4,
            agg_heads: 8,
            m_text: 40,
            m_obj: 36,
            m_know: 80,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_text == 0 || self.hidden_image == 0 {
            return bad("hidden sizes must be positive".into());
        }
        if self.n_heads_text == 0 || !self.hidden_text.is_multiple_of(self.n_heads_text) {
            return bad(format!(
                "hidden_text {} not divisible by n_heads_text {}",
                self.hidden_text, self.n_heads_text
            ));
        }
        if self.n_heads_image == 0 || !self.hidden_image.is_multiple_of(self.n_heads_image) {
            return bad(format!(
                "hidden_image {} not divisible by n_heads_image {}",
                self.hidden_image, self.n_heads_image
            ));
        }
        if self.agg_heads == 0 {
            return bad("agg_heads must be positive".into());
        }
        if self.ffn_multiplier == 0 {
            return bad("ffn_multiplier must be positive".into());
        }
        if self.m_text == 0 || self.m_know == 0 {
            return bad("m_text and m_know must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    /// Length of the shared text positional table (titles and knowledge text).
    pub fn max_text_positions(&self) -> usize {
        self.m_text.max(self.m_know)
    }
}
