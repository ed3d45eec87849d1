//! Corpus-aware training (CAT) for encoder-decoder translation models, and
//! OCAT: fine-tuning a CAT-pretrained model by updating a single tag-embedding
//! row while every other weight stays frozen.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem, the clock or the command line lives in the `catlab` crate.
//!
//! Module map:
//!
//! * [`corpus`]: records, tag registry, URL-domain splitting, capped mixtures, tag injection
//! * [`tokenizer`]: joint BPE vocabulary with reserved special and tag tokens
//! * [`model`]: post-norm transformer with shared embeddings and hand-written backprop
//! * [`trainer`]: Adam with inverse-sqrt warmup, freeze masks, checkpoint averaging
//! * [`finetune`]: OCAT plus full, adapter and LoRA baselines
//! * [`decode`]: greedy and beam search with an inference tag
//! * [`eval`]: chrF, paired bootstrap, significance-marked score tables
//! * [`synth`] and [`experiment`]: synthetic corpora and end-to-end pipelines

#![no_std]

extern crate alloc;

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod finetune;
pub mod hash;
pub mod model;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
