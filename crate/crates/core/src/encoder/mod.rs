//! DistilBERT-shaped encoder: token + learned position embeddings, post-LN
//! attention/feed-forward blocks, optional first-token classification head.

mod forward;
mod state;

pub use forward::{forward_sequence, model_forward, BoundParams, ForwardOutput, ForwardValues, Mode, SequenceInput};
pub use state::{
    init_student_from_teacher, ClassifierParams, EncoderParams, LayerParams, ModelState, Param,
    TrainableSelector,
};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub attention_variant: AttentionVariant,
    /// Initial per-head output scale `η`.
    pub eta_init: f64,
}

impl EncoderConfig {
    /// Laptop-sized model used by tests, the CLI defaults and the
    /// acceptance runs.
    pub fn desk(variant: AttentionVariant) -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            d_ffn: 64,
            n_heads: 4,
            d_head: 8,
            vocab_size: 256,
            max_seq_len: 64,
            dropout: 0.1,
            attention_dropout: 0.1,
            attention_variant: variant,
            eta_init: 1.0,
        }
    }

    /// DistilBERT-base extents.
    pub fn full_scale(variant: AttentionVariant) -> Self {
        Self {
            n_layers: 6,
            d_model: 768,
            d_ffn: 3072,
            n_heads: 12,
            d_head: 64,
            vocab_size: 30522,
            max_seq_len: 512,
            dropout: 0.1,
            attention_dropout: 0.1,
            attention_variant: variant,
            eta_init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be >= 1")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::contract(format!(
                "d_model ({}) must equal n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::contract(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if !self.eta_init.is_finite() {
            return Err(Error::contract("eta_init must be finite"));
        }
        Ok(())
    }

    /// True when every tensor extent matches (rates and variant may differ).
    pub fn same_extents(&self, other: &EncoderConfig) -> bool {
        self.n_layers == other.n_layers
            && self.d_model == other.d_model
            && self.d_ffn == other.d_ffn
            && self.n_heads == other.n_heads
            && self.d_head == other.d_head
            && self.vocab_size == other.vocab_size
            && self.max_seq_len == other.max_seq_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        EncoderConfig::desk(AttentionVariant::Inhibitor).validate().unwrap();
        EncoderConfig::full_scale(AttentionVariant::DotProduct).validate().unwrap();
    }

    #[test]
    fn head_product_enforced() {
        let mut c = EncoderConfig::desk(AttentionVariant::Inhibitor);
        c.d_head = 7;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::desk(AttentionVariant::Inhibitor);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
