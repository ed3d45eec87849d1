//! Encoder-decoder transformer with one embedding matrix shared by the encoder
//! input, the decoder input and the output projection.
//!
//! Gradients are derived by hand. [`loss_and_grad`] recomputes the forward pass
//! with caches and runs the reverse sweep for one example at a time, summing
//! into a [`Gradients`] buffer.

mod batch;
mod incremental;
mod net;
pub mod ops;
mod params;
mod scalar;

pub use batch::{Batch, SeqPair};
pub use incremental::{DecoderState, EncodedSource};
pub use net::{forward, loss_and_grad, per_example_losses, ForwardOutput, GradOptions, Mode};
pub use params::{
    count_params, init_params, layout_specs, AdapterConfig, Extensions, Gradients, LoraConfig, Parameters, Tensor,
    TensorSpec,
};
pub use scalar::Scalar;


use alloc::format;
use serde::{Deserialize, Serialize};

use crate::hash::Fnv64;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    /// `LN(x + sublayer(x))`, the base-transformer arrangement.
    Post,
    /// `x + sublayer(LN(x))` with a final norm per stack.
    Pre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub share_embeddings: bool,
    pub norm: NormPlacement,
    pub seed: u64,
}

impl ModelConfig {
    /// 6+6 layers, d=512, ffn 2048, 8×64 heads, dropout 0.1.
    pub fn paper_base(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            d_ffn: 2048,
            n_heads: 8,
            head_dim: 64,
            vocab_size,
            max_len: 1024,
            dropout: 0.1,
            label_smoothing: 0.1,
            share_embeddings: true,
            norm: NormPlacement::Post,
            seed: 1,
        }
    }

    /// 2+2 layers, d=64, ffn 256, 4×16 heads, no dropout.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            d_ffn: 256,
            n_heads: 4,
            head_dim: 16,
            vocab_size,
            max_len: 64,
            dropout: 0.0,
            label_smoothing: 0.1,
            share_embeddings: true,
            norm: NormPlacement::Post,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.n_heads * self.head_dim != self.d_model {
            return bad("n_heads × head_dim must equal d_model");
        }
        if self.d_model == 0 || self.d_ffn == 0 || self.vocab_size < 5 || self.max_len == 0 {
            return bad("dimensions must be positive");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !self.share_embeddings {
            return bad("only shared embeddings are supported");
        }
        Ok(())
    }

    /// Stable hash over every architectural field (not the seed or dropout).
    pub fn arch_hash(&self) -> u64 {
        let mut h = Fnv64::default();
        for v in [
            self.enc_layers,
            self.dec_layers,
            self.d_model,
            self.d_ffn,
            self.n_heads,
            self.head_dim,
            self.vocab_size,
            self.max_len,
        ] {
            h.write_u64(v as u64);
        }
        h.write_u64(self.share_embeddings as u64);
        h.write_u64(matches!(self.norm, NormPlacement::Pre) as u64);
        h.finish()
    }
}
