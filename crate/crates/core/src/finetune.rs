//! OCAT (tune one tag-embedding row of a CAT-pretrained model) and the
//! baseline fine-tuners: full weights, bottleneck adapters and LoRA.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{inject_explicit_tag, CorpusRecord, TagRegistry};
use crate::decode::{decode_corpus, DecodeConfig};
use crate::eval::{chrf_corpus, ChrFConfig};
use crate::model::{Extensions, ModelConfig, Parameters, Scalar, SeqPair};
use crate::tokenizer::Tokenizer;
use crate::trainer::{train_loop_observed, FreezeMask, LogEntry, Schedule, TrainConfig};
use crate::{Error, Result};

pub use crate::model::{AdapterConfig, LoraConfig};

impl AdapterConfig {
    /// Width used for the full-scale count comparison (258,288 at 6+6, d=512).
    pub const PAPER: AdapterConfig = AdapterConfig { bottleneck_dim: 10 };
    pub const DESK: AdapterConfig = AdapterConfig { bottleneck_dim: 8 };
}

impl LoraConfig {
    /// Rank 32 on q and v of every attention block: 1,179,648 at d=512.
    pub const PAPER: LoraConfig = LoraConfig { rank: 32, alpha: 32.0 };
    pub const DESK: LoraConfig = LoraConfig { rank: 4, alpha: 4.0 };
}

/// Starting point for the OCAT row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowInit {
    /// Copy another tag's row (the best-ranked one by default).
    Tag(String),
    /// Fresh draw from the embedding init distribution.
    Random,
    /// Keep whatever the row currently holds.
    Keep,
}

impl RowInit {
    /// `"random"`, `"keep"`, or a tag name.
    pub fn parse(s: &str) -> Self {
        match s {
            "random" => RowInit::Random,
            "keep" => RowInit::Keep,
            tag => RowInit::Tag(tag.into()),
        }
    }
}

/// Optimization settings shared by every fine-tuner. Optimizer state always starts fresh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub steps: usize,
    pub lr: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl FinetuneSettings {
    /// 500 steps at lr 1e-3.
    pub fn ocat_default(seed: u64) -> Self {
        FinetuneSettings {
            steps: 500,
            lr: 1e-3,
            max_tokens: 512,
            seed,
        }
    }

    fn train_config(&self) -> TrainConfig {
        let mut tc = TrainConfig::new(Schedule::constant(self.lr), self.steps, self.max_tokens, self.seed);
        tc.log_every = (self.steps / 10).max(1);
        tc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcatPlan {
    pub target_tag: String,
    pub init_from: RowInit,
    pub finetune_data: Vec<CorpusRecord>,
    pub settings: FinetuneSettings,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<F> {
    pub params: Parameters<F>,
    pub trainable: usize,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Method {
    Ocat,
    Full,
    Adapter(AdapterConfig),
    Lora(LoraConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ocat => "ocat",
            Method::Full => "full",
            Method::Adapter(_) => "adapter",
            Method::Lora(_) => "lora",
        }
    }

    /// Trainable coordinates for this method on a model of shape `cfg`.
    pub fn trainable_count(&self, cfg: &ModelConfig) -> usize {
        match self {
            Method::Ocat => cfg.d_model,
            Method::Full => crate::model::count_params(cfg),
            Method::Adapter(a) => Extensions {
                adapter: Some(*a),
                lora: None,
            }
            .count(cfg),
            Method::Lora(l) => Extensions {
                adapter: None,
                lora: Some(*l),
            }
            .count(cfg),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sorts `(tag, score)` by score, highest first; equal scores keep input order.
pub fn sort_ranking(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored
}

/// Decodes the dev set once per registered tag and ranks tags by chrF.
#[allow(clippy::too_many_arguments)]
pub fn rank_tags<F: Scalar>(
    params: &Parameters<F>,
    registry: &TagRegistry,
    dev_sources: &[String],
    dev_refs: &[String],
    decode: &DecodeConfig,
    chrf: &ChrFConfig,
    tokenizer: &Tokenizer,
) -> Result<Vec<(String, f64)>> {
    let mut scored = Vec::with_capacity(registry.len());
    for tag in registry.tags() {
        let cfg = DecodeConfig {
            inference_tag: tag.into(),
            ..decode.clone()
        };
        let hyps = decode_corpus(params, dev_sources, &cfg, tokenizer)?;
        scored.push((String::from(tag), chrf_corpus(&hyps, dev_refs, chrf)?));
    }
    Ok(sort_ranking(scored))
}

/// Records of the `take_top` best-ranked corpora, optionally followed by the
/// validation set. Records keep their original `corpus_id`.
pub fn build_ocat_dataset(
    ranked: &[(String, f64)],
    corpora: &BTreeMap<String, Vec<CorpusRecord>>,
    validation: &[CorpusRecord],
    take_top: usize,
    include_validation: bool,
) -> Result<Vec<CorpusRecord>> {
    if take_top > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "take_top {take_top} exceeds {} ranked tags",
            ranked.len()
        )));
    }
    let mut out = Vec::new();
    for (tag, _) in &ranked[..take_top] {
        let recs = corpora.get(tag).ok_or_else(|| Error::UnknownTag(tag.clone()))?;
        out.extend(recs.iter().cloned());
    }
    if include_validation {
        out.extend(validation.iter().cloned());
    }
    Ok(out)
}

/// Encodes records with one fixed tag.
pub fn retag<S: AsRef<str>>(records: &[CorpusRecord], tag: S, tokenizer: &Tokenizer) -> Result<Vec<SeqPair>> {
    records
        .iter()
        .map(|r| inject_explicit_tag(r, tag.as_ref(), tokenizer).map(SeqPair::from))
        .collect()
}

fn check_data(data: &[SeqPair]) -> Result<()> {
    if data.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

/// Re-tags the fine-tune data with `plan.target_tag` and trains only that
/// tag's embedding row. Every other coordinate comes back bit-identical.
pub fn ocat_finetune<F: Scalar>(
    params: &Parameters<F>,
    plan: &OcatPlan,
    tokenizer: &Tokenizer,
) -> Result<FinetuneOutcome<F>> {
    ocat_finetune_observed(params, plan, tokenizer, &mut |_, _| Ok(()))
}

/// [`ocat_finetune`] with a per-step observer (see [`train_loop_observed`]).
pub fn ocat_finetune_observed<F: Scalar>(
    params: &Parameters<F>,
    plan: &OcatPlan,
    tokenizer: &Tokenizer,
    observer: &mut dyn FnMut(usize, &Parameters<F>) -> Result<()>,
) -> Result<FinetuneOutcome<F>> {
    let vocab = &tokenizer.vocab;
    let tag_id = vocab
        .tag_id(&plan.target_tag)
        .ok_or_else(|| Error::UnknownTag(plan.target_tag.clone()))?;
    if plan.finetune_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = params.config.d_model;
    let mask = FreezeMask::embedding_row(d, tag_id);
    let trainable = mask.trainable_count(params)?;
    if plan.settings.steps == 0 {
        return Ok(FinetuneOutcome {
            params: params.clone(),
            trainable,
            log: Vec::new(),
        });
    }
    let mut start = params.clone();
    match &plan.init_from {
        RowInit::Keep => {}
        RowInit::Tag(src) => {
            let src_id = vocab.tag_id(src).ok_or_else(|| Error::UnknownTag(src.clone()))?;
            let row: Vec<F> = params.embedding_row(src_id).to_vec();
            start.embedding_row_mut(tag_id).copy_from_slice(&row);
        }
        RowInit::Random => {
            let bound = num_traits::Float::sqrt(6.0 / (params.config.vocab_size + d) as f64);
            let mut rng = ChaCha8Rng::seed_from_u64(plan.settings.seed ^ 0x5EED_0CA7);
            for x in start.embedding_row_mut(tag_id) {
                *x = F::of(rng.gen_range(-bound..=bound));
            }
        }
    }
    let data = retag(&plan.finetune_data, &plan.target_tag, tokenizer)?;
    let out = train_loop_observed(start, &data, &plan.settings.train_config(), &mask, observer)?;
    Ok(FinetuneOutcome {
        params: out.params,
        trainable,
        log: out.log,
    })
}

/// Trains every coordinate.
pub fn full_finetune<F: Scalar>(
    params: &Parameters<F>,
    data: &[SeqPair],
    settings: &FinetuneSettings,
) -> Result<FinetuneOutcome<F>> {
    full_finetune_observed(params, data, settings, &mut |_, _| Ok(()))
}

fn full_finetune_observed<F: Scalar>(
    params: &Parameters<F>,
    data: &[SeqPair],
    settings: &FinetuneSettings,
    observer: &mut dyn FnMut(usize, &Parameters<F>) -> Result<()>,
) -> Result<FinetuneOutcome<F>> {
    check_data(data)?;
    let out = train_loop_observed(
        params.clone(),
        data,
        &settings.train_config(),
        &FreezeMask::All,
        observer,
    )?;
    Ok(FinetuneOutcome {
        trainable: out.params.num_params(),
        params: out.params,
        log: out.log,
    })
}

fn extension_finetune<F: Scalar>(
    params: &Parameters<F>,
    ext: Extensions,
    data: &[SeqPair],
    settings: &FinetuneSettings,
    is_ext_tensor: fn(&str) -> bool,
    observer: &mut dyn FnMut(usize, &Parameters<F>) -> Result<()>,
) -> Result<FinetuneOutcome<F>> {
    check_data(data)?;
    let merged = Extensions {
        adapter: ext.adapter.or(params.ext.adapter),
        lora: ext.lora.or(params.ext.lora),
    };
    let start = params.with_extensions(merged, settings.seed)?;
    let mask = FreezeMask::tensors_where(&start, is_ext_tensor);
    let trainable = mask.trainable_count(&start)?;
    let out = train_loop_observed(start, data, &settings.train_config(), &mask, observer)?;
    Ok(FinetuneOutcome {
        params: out.params,
        trainable,
        log: out.log,
    })
}

pub fn is_adapter_tensor(name: &str) -> bool {
    name.contains("_adapter.")
}

pub fn is_lora_tensor(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Adds zero-initialized bottleneck adapters and trains only them.
pub fn adapter_finetune<F: Scalar>(
    params: &Parameters<F>,
    config: AdapterConfig,
    data: &[SeqPair],
    settings: &FinetuneSettings,
) -> Result<FinetuneOutcome<F>> {
    let ext = Extensions {
        adapter: Some(config),
        lora: None,
    };
    extension_finetune(params, ext, data, settings, is_adapter_tensor, &mut |_, _| Ok(()))
}

/// Adds LoRA deltas (B = 0) on q and v and trains only them.
pub fn lora_finetune<F: Scalar>(
    params: &Parameters<F>,
    config: LoraConfig,
    data: &[SeqPair],
    settings: &FinetuneSettings,
) -> Result<FinetuneOutcome<F>> {
    let ext = Extensions {
        adapter: None,
        lora: Some(config),
    };
    extension_finetune(params, ext, data, settings, is_lora_tensor, &mut |_, _| Ok(()))
}

/// Dispatches a baseline by method. OCAT needs a plan and goes through [`ocat_finetune`].
pub fn baseline_finetune<F: Scalar>(
    params: &Parameters<F>,
    method: Method,
    data: &[SeqPair],
    settings: &FinetuneSettings,
) -> Result<FinetuneOutcome<F>> {
    baseline_finetune_observed(params, method, data, settings, &mut |_, _| Ok(()))
}

/// [`baseline_finetune`] with a per-step observer (see [`train_loop_observed`]).
pub fn baseline_finetune_observed<F: Scalar>(
    params: &Parameters<F>,
    method: Method,
    data: &[SeqPair],
    settings: &FinetuneSettings,
    observer: &mut dyn FnMut(usize, &Parameters<F>) -> Result<()>,
) -> Result<FinetuneOutcome<F>> {
    let ext = |adapter, lora| Extensions { adapter, lora };
    match method {
        Method::Full => full_finetune_observed(params, data, settings, observer),
        Method::Adapter(a) => {
            extension_finetune(params, ext(Some(a), None), data, settings, is_adapter_tensor, observer)
        }
        Method::Lora(l) => extension_finetune(params, ext(None, Some(l)), data, settings, is_lora_tensor, observer),
        Method::Ocat => Err(Error::InvalidArgument("OCAT needs an OcatPlan".into())),
    }
}
