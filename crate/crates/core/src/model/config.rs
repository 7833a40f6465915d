use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::numerics::pe::DEFAULT_TEMPERATURE;
use crate::query::{AnchorScaleSet, ContentInit, QueryMode};

/// Input stride of the stem: a 4×4 patch convolution then a 2×2 one.
pub const STEM_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Query count `K`.
    pub num_queries: usize,
    /// Object classes, not counting the no-object column.
    pub num_classes: usize,
    pub attention: AttentionKind,
    pub anchors: AnchorScaleSet,
    pub content_init: ContentInit,
    pub query_mode: QueryMode,
    pub dropout: f64,
    pub stem_channels: usize,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            ffn_hidden: 256,
            n_enc: 2,
            n_dec: 2,
            num_queries: 25,
            num_classes: 3,
            attention: AttentionKind::Hv,
            anchors: AnchorScaleSet::default(),
            content_init: ContentInit::FromBox,
            query_mode: QueryMode::IpIt,
            dropout: 0.1,
            stem_channels: 32,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl ModelConfig {
    /// A small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self { d: 8, heads: 2, ffn_hidden: 12, n_enc: 1, n_dec: 2, num_queries: 3, stem_channels: 4, dropout: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("model.d = {} is not divisible by model.heads = {}", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            return fail(format!("model.d = {} must be a multiple of 4 for the positional embeddings", self.d));
        }
        if self.num_queries == 0 {
            return fail("model.num_queries must be at least 1".into());
        }
        if self.n_dec == 0 {
            return fail("model.n_dec must be at least 1".into());
        }
        if self.num_classes == 0 || self.ffn_hidden == 0 || self.stem_channels == 0 {
            return fail("model.num_classes, ffn_hidden and stem_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("model.dropout = {} must lie in [0, 1)", self.dropout));
        }
        if self.temperature <= 0.0 {
            return fail("model.temperature must be positive".into());
        }
        self.anchors.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}
