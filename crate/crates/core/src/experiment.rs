//! End-to-end pipelines on synthetic corpora: pretrain with and without
//! corpus tags, rank tags, run OCAT, compare against the baseline
//! fine-tuners, and sweep hyperparameters and fine-tune set sizes.
//!
//! Every report carries the config hash, the seeds and the metric signature,
//! so a report alone is enough to reproduce its numbers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_mixture, inject_tag, tag_for_corpus, CorpusRecord, MixtureManifest, MixtureSpec, TagOrigin, TagRegistry,
};
use crate::decode::{decode_corpus, decode_untagged, DecodeConfig};
use crate::eval::{chrf_corpus, score_table, ChrFConfig, ScoreTable, SystemOutputs};
use crate::finetune::{
    baseline_finetune_observed, ocat_finetune_observed, rank_tags, retag, AdapterConfig, FinetuneSettings, LoraConfig,
    Method, OcatPlan, RowInit,
};
use crate::hash::fnv64;
use crate::model::{init_params, ModelConfig, Parameters, SeqPair};
use crate::synth::{clean_pairs, make_synthetic_corpora, NoiseKind, SyntheticCorpus, SyntheticTaskSpec};
use crate::tokenizer::{train_subword, Tokenizer, EOS};
use crate::trainer::{average_checkpoints, train_loop, Checkpoint, FreezeMask, LogEntry, Schedule, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Average this many final checkpoints (1 keeps the last parameters).
    pub average_last: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lrs: Vec<f64>,
    /// Milestones at which each run is evaluated; the run lasts until the largest.
    pub steps: Vec<usize>,
    /// Pairs taken from the front of the dev set for fine-tuning.
    pub tune_size: usize,
    /// Test pairs used as the held-out set (from the front of the test set).
    pub heldout_size: usize,
    pub adapter: AdapterConfig,
    pub lora: LoraConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: SyntheticTaskSpec,
    pub data_seed: u64,
    pub dev_size: usize,
    pub test_size: usize,
    /// Requested subword vocabulary size (training may stop earlier).
    pub subword_vocab: usize,
    pub hq_tag: String,
    pub mixture: MixtureSpec,
    /// Architecture template; `vocab_size` is replaced by the tokenizer's.
    pub model: ModelConfig,
    pub pretrain: PretrainSettings,
    /// `inference_tag` is replaced per use.
    pub decode: DecodeConfig,
    pub chrf: ChrFConfig,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub ocat: FinetuneSettings,
    pub ocat_take_top: usize,
    pub ocat_include_validation: bool,
    /// Row initialization for the OCAT tag; `None` copies the best-ranked tag.
    pub ocat_init: Option<RowInit>,
    /// Settings for the single full fine-tuning run of the overfitting check.
    pub overfit_full: FinetuneSettings,
    pub sweep: SweepGrid,
    pub sizes: Vec<usize>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: four corpora of differing quality, a 2+2-layer
    /// d=64 model and grids sized for a single CPU core.
    pub fn desk() -> Self {
        let corpus = |name: &str, size, noise| SyntheticCorpus {
            name: name.into(),
            size,
            noise,
        };
        let mut model = ModelConfig::desk(0);
        model.max_len = 32;
        ExperimentConfig {
            name: "desk".into(),
            task: SyntheticTaskSpec {
                vocab_size: 20,
                min_len: 3,
                max_len: 10,
                mapping_seed: 11,
                corpora: vec![
                    corpus("clean", 1000, NoiseKind::None),
                    corpus("noisy", 1000, NoiseKind::Substitution { p: 0.3 }),
                    corpus("remap", 2500, NoiseKind::Remap { p: 0.3 }),
                    corpus("misaligned", 2500, NoiseKind::Misaligned),
                ],
            },
            data_seed: 1,
            dev_size: 400,
            test_size: 300,
            subword_vocab: 128,
            hq_tag: "<HQ>".into(),
            mixture: MixtureSpec {
                per_tag_cap: 2500,
                shuffle_seed: 2,
            },
            model,
            pretrain: PretrainSettings {
                steps: 3000,
                lr_max: 2e-3,
                warmup_steps: 400,
                max_tokens: 1024,
                seed: 3,
                checkpoint_every: 250,
                average_last: 4,
            },
            decode: DecodeConfig::new(""),
            chrf: ChrFConfig::default(),
            bootstrap_resamples: 1000,
            bootstrap_seed: 4,
            ocat: FinetuneSettings::ocat_default(5),
            ocat_take_top: 0,
            ocat_include_validation: true,
            ocat_init: None,
            overfit_full: FinetuneSettings {
                steps: 800,
                lr: 1e-2,
                max_tokens: 512,
                seed: 6,
            },
            sweep: SweepGrid {
                lrs: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
                steps: vec![50, 200, 800],
                tune_size: 16,
                heldout_size: 200,
                adapter: AdapterConfig::DESK,
                lora: LoraConfig::DESK,
            },
            sizes: vec![1, 10, 100, 400],
        }
    }

    /// Hash of the whole configuration.
    pub fn config_hash(&self) -> u64 {
        fnv64(format!("{self:?}").as_bytes())
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        [
            ("data", self.data_seed),
            ("mapping", self.task.mapping_seed),
            ("mixture", self.mixture.shuffle_seed),
            ("model_init", self.model.seed),
            ("pretrain", self.pretrain.seed),
            ("ocat", self.ocat.seed),
            ("overfit_full", self.overfit_full.seed),
            ("bootstrap", self.bootstrap_seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn decode_with(&self, tag: &str) -> DecodeConfig {
        DecodeConfig {
            inference_tag: tag.into(),
            ..self.decode.clone()
        }
    }
}

/// One cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Num(f64),
    Text(String),
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.into())
    }
}
impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}
impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Num(x)
    }
}
impl From<usize> for Value {
    fn from(x: usize) -> Self {
        Value::Int(x as i64)
    }
}
impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Num(x) => Some(x),
            Value::Int(i) => Some(i as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }
}

/// A table plus everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub experiment: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub metric_signature: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Report {
    /// Empty report with the provenance fields taken from `cfg`.
    pub fn new(kind: &str, cfg: &ExperimentConfig, columns: &[&str]) -> Self {
        Report {
            kind: kind.into(),
            experiment: cfg.name.clone(),
            config_hash: format!("{:016x}", cfg.config_hash()),
            seeds: cfg.seeds(),
            metric_signature: cfg.chrf.signature(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Value at `(row, column name)`.
    pub fn get(&self, row: usize, column: &str) -> Option<&Value> {
        self.rows.get(row)?.get(self.column(column)?)
    }

    /// Rows where `column` equals the text `value`.
    pub fn rows_where(&self, column: &str, value: &str) -> Vec<usize> {
        let Some(c) = self.column(column) else {
            return Vec::new();
        };
        (0..self.rows.len())
            .filter(|&r| self.rows[r][c].as_str() == Some(value))
            .collect()
    }
}

/// Generated corpora, held-out sets, tag registry, tokenizer and mixture.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Records per tag.
    pub corpora: BTreeMap<String, Vec<CorpusRecord>>,
    pub registry: TagRegistry,
    pub tokenizer: Tokenizer,
    pub mixture: Vec<CorpusRecord>,
    pub manifest: MixtureManifest,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let by_name = make_synthetic_corpora(&cfg.task, cfg.data_seed)?;
    let mut registry = TagRegistry::new();
    let mut corpora = BTreeMap::new();
    for c in &cfg.task.corpora {
        let tag = registry.register(&c.name, TagOrigin::Synthetic)?;
        corpora.insert(tag, by_name[&c.name].clone());
    }
    let (mixture, manifest) = build_mixture(&corpora, &registry, &cfg.mixture)?;
    let dev = clean_pairs(&cfg.task, cfg.dev_size, "dev", cfg.data_seed)?;
    let test = clean_pairs(&cfg.task, cfg.test_size, "test", cfg.data_seed)?;
    let mut reserved: Vec<String> = registry.tags().map(String::from).collect();
    if registry.contains_tag(&cfg.hq_tag) {
        return Err(Error::DuplicateTag(cfg.hq_tag.clone()));
    }
    reserved.push(cfg.hq_tag.clone());
    let text: Vec<&str> = mixture
        .iter()
        .flat_map(|r| [r.source.as_str(), r.target.as_str()])
        .collect();
    let tokenizer = train_subword(&text, cfg.subword_vocab, &reserved)?;
    Ok(PreparedData {
        corpora,
        registry,
        tokenizer,
        mixture,
        manifest,
        dev,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: Parameters<f32>,
    pub log: Vec<LogEntry>,
    /// Steps of the checkpoints that were averaged into `params`.
    pub averaged_steps: Vec<usize>,
    /// The last checkpoints kept during training, oldest first.
    pub checkpoints: Vec<Checkpoint<f32>>,
}

/// Encodes the mixture with corpus tags (`tagged`) or with none.
pub fn encode_mixture(data: &PreparedData, tagged: bool) -> Result<Vec<SeqPair>> {
    data.mixture
        .iter()
        .map(|r| {
            if tagged {
                inject_tag(r, &data.registry, &data.tokenizer).map(SeqPair::from)
            } else {
                let mut source = data.tokenizer.encode(&r.source);
                let mut target = data.tokenizer.encode(&r.target);
                if source.is_empty() {
                    return Err(Error::EmptySource);
                }
                source.push(EOS);
                target.push(EOS);
                Ok(SeqPair { source, target })
            }
        })
        .collect()
}

pub fn model_config(cfg: &ExperimentConfig, data: &PreparedData) -> ModelConfig {
    ModelConfig {
        vocab_size: data.tokenizer.vocab.size(),
        ..cfg.model.clone()
    }
}

/// Trains a model from scratch on the mixture and averages the last checkpoints.
pub fn pretrain(cfg: &ExperimentConfig, data: &PreparedData, tagged: bool) -> Result<TrainedModel> {
    let p = &cfg.pretrain;
    let params = init_params::<f32>(&model_config(cfg, data))?;
    let pairs = encode_mixture(data, tagged)?;
    let mut tc = TrainConfig::new(
        Schedule {
            lr_max: p.lr_max,
            warmup_steps: p.warmup_steps,
        },
        p.steps,
        p.max_tokens,
        p.seed,
    );
    tc.checkpoint_every = p.checkpoint_every;
    tc.keep_checkpoints = p.average_last.max(1);
    tc.log_every = (p.steps / 20).max(1);
    let out = train_loop(params, &pairs, &tc, &FreezeMask::All)?;
    let (params, averaged_steps) = if p.average_last > 1 && !out.checkpoints.is_empty() {
        (
            average_checkpoints(&out.checkpoints)?,
            out.checkpoints.iter().map(|c| c.step).collect(),
        )
    } else {
        (out.params.clone(), vec![p.steps])
    };
    Ok(TrainedModel {
        params,
        log: out.log,
        averaged_steps,
        checkpoints: out.checkpoints,
    })
}

/// Prepared data plus the CAT-trained and the untagged baseline model.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub data: PreparedData,
    pub cat: TrainedModel,
    pub baseline: TrainedModel,
}

pub fn pretrain_all(cfg: &ExperimentConfig) -> Result<Pretrained> {
    let data = prepare_data(cfg)?;
    let cat = pretrain(cfg, &data, true)?;
    let baseline = pretrain(cfg, &data, false)?;
    Ok(Pretrained { data, cat, baseline })
}

fn sources(records: &[CorpusRecord]) -> Vec<String> {
    records.iter().map(|r| r.source.clone()).collect()
}

fn references(records: &[CorpusRecord]) -> Vec<String> {
    records.iter().map(|r| r.target.clone()).collect()
}

/// Decodes `records` with `tag` (or untagged) and scores them.
pub fn evaluate(
    cfg: &ExperimentConfig,
    params: &Parameters<f32>,
    tokenizer: &Tokenizer,
    records: &[CorpusRecord],
    tag: Option<&str>,
) -> Result<(f64, Vec<String>)> {
    let src = sources(records);
    let hyps = match tag {
        Some(t) => decode_corpus(params, &src, &cfg.decode_with(t), tokenizer)?,
        None => decode_untagged(params, &src, &cfg.decode, tokenizer)?,
    };
    Ok((chrf_corpus(&hyps, &references(records), &cfg.chrf)?, hyps))
}

/// Tags ranked by dev chrF, best first.
pub fn rank_pretrained(cfg: &ExperimentConfig, pre: &Pretrained) -> Result<Vec<(String, f64)>> {
    let d = &pre.data;
    rank_tags(
        &pre.cat.params,
        &d.registry,
        &sources(&d.dev),
        &references(&d.dev),
        &cfg.decode,
        &cfg.chrf,
        &d.tokenizer,
    )
}

fn ocat_plan(cfg: &ExperimentConfig, best_tag: &str, data: Vec<CorpusRecord>, settings: FinetuneSettings) -> OcatPlan {
    OcatPlan {
        target_tag: cfg.hq_tag.clone(),
        init_from: cfg.ocat_init.clone().unwrap_or_else(|| RowInit::Tag(best_tag.into())),
        finetune_data: data,
        settings,
    }
}

/// Runs OCAT on the configured fine-tune data (top corpora and/or dev).
pub fn run_ocat(cfg: &ExperimentConfig, pre: &Pretrained, ranked: &[(String, f64)]) -> Result<Parameters<f32>> {
    let d = &pre.data;
    let data = crate::finetune::build_ocat_dataset(
        ranked,
        &d.corpora,
        &d.dev,
        cfg.ocat_take_top,
        cfg.ocat_include_validation,
    )?;
    let best = &ranked.first().ok_or(Error::EmptyDataset)?.0;
    let plan = ocat_plan(cfg, best, data, cfg.ocat);
    Ok(ocat_finetune_observed(&pre.cat.params, &plan, &d.tokenizer, &mut |_, _| Ok(()))?.params)
}

/// Outcome of the main pipeline: the score table plus the pieces it was built from.
#[derive(Debug, Clone)]
pub struct CatExperiment {
    pub report: Report,
    pub table: ScoreTable,
    pub ranked: Vec<(String, f64)>,
    pub ocat: Parameters<f32>,
}

/// Baseline vs CAT (every tag) vs OCAT, scored on dev and test with
/// significance marks against the runner-up.
pub fn run_cat_experiment(cfg: &ExperimentConfig, pre: &Pretrained) -> Result<CatExperiment> {
    let d = &pre.data;
    let ranked = rank_pretrained(cfg, pre)?;
    let ocat = run_ocat(cfg, pre, &ranked)?;
    let sets = [("dev", &d.dev), ("test", &d.test)];
    let mut systems = Vec::new();
    let mut labels = Vec::new();
    let mut add = |label: &str, tag: Option<&str>, params: &Parameters<f32>| -> Result<()> {
        let mut outputs = BTreeMap::new();
        for (name, recs) in sets {
            outputs.insert(name.to_string(), evaluate(cfg, params, &d.tokenizer, recs, tag)?.1);
        }
        systems.push(SystemOutputs {
            system: format!("{label} {}", tag.unwrap_or("-")),
            outputs,
        });
        labels.push((label.to_string(), tag.unwrap_or("-").to_string()));
        Ok(())
    };
    add("baseline", None, &pre.baseline.params)?;
    for tag in d.registry.tags() {
        add("cat", Some(tag), &pre.cat.params)?;
    }
    add("ocat", Some(&cfg.hq_tag), &ocat)?;
    let refs: BTreeMap<String, Vec<String>> = sets.iter().map(|(n, r)| (n.to_string(), references(r))).collect();
    let table = score_table(&systems, &refs, &cfg.chrf, cfg.bootstrap_resamples, cfg.bootstrap_seed)?;
    let mut report = Report::new(
        "cat",
        cfg,
        &[
            "system",
            "tag",
            "dev_chrf",
            "dev_bold",
            "test_chrf",
            "test_bold",
            "test_p",
        ],
    );
    let col = |name: &str| table.testsets.iter().position(|t| t == name).expect("table column");
    let (dc, tc) = (col("dev"), col("test"));
    for ((label, tag), row) in labels.into_iter().zip(&table.rows) {
        report.rows.push(vec![
            label.into(),
            tag.into(),
            row.cells[dc].chrf.into(),
            row.cells[dc].bold.into(),
            row.cells[tc].chrf.into(),
            row.cells[tc].bold.into(),
            row.cells[tc].p_value.map_or(Value::Text("-".into()), Value::Num),
        ]);
    }
    Ok(CatExperiment {
        report,
        table,
        ranked,
        ocat,
    })
}

/// Fine-tune and held-out pools for the sweeps, plus the pretrained reference scores.
struct SweepContext<'a> {
    best_tag: String,
    tune: &'a [CorpusRecord],
    heldout: &'a [CorpusRecord],
    ref_heldout: f64,
}

fn sweep_context<'a>(
    cfg: &ExperimentConfig,
    pre: &'a Pretrained,
    ranked: &[(String, f64)],
) -> Result<SweepContext<'a>> {
    let d = &pre.data;
    let g = &cfg.sweep;
    if g.tune_size > d.dev.len() || g.heldout_size > d.test.len() || g.tune_size == 0 || g.heldout_size == 0 {
        return Err(Error::InvalidArgument(
            "sweep tune/held-out sizes exceed the dev/test sets".into(),
        ));
    }
    let best_tag = ranked.first().ok_or(Error::EmptyDataset)?.0.clone();
    let heldout = &d.test[..g.heldout_size];
    let (ref_heldout, _) = evaluate(cfg, &pre.cat.params, &d.tokenizer, heldout, Some(&best_tag))?;
    Ok(SweepContext {
        best_tag,
        tune: &d.dev[..g.tune_size],
        heldout,
        ref_heldout,
    })
}

/// `(steps, tune chrF, held-out chrF)` at each step milestone of one run.
type MilestoneScores = Vec<(usize, f64, f64)>;

/// Trainable count and milestone scores of one fine-tuning run.
fn milestone_run(
    cfg: &ExperimentConfig,
    pre: &Pretrained,
    ctx: &SweepContext<'_>,
    method: Method,
    lr: f64,
    milestones: &[usize],
    tune: &[CorpusRecord],
) -> Result<(usize, MilestoneScores)> {
    let d = &pre.data;
    let max_steps = milestones.iter().copied().max().unwrap_or(0);
    let settings = FinetuneSettings {
        steps: max_steps,
        lr,
        ..cfg.ocat
    };
    let eval_tag = if method == Method::Ocat {
        cfg.hq_tag.clone()
    } else {
        ctx.best_tag.clone()
    };
    let mut scores = Vec::new();
    let mut observer = |step: usize, p: &Parameters<f32>| -> Result<()> {
        if milestones.contains(&step) {
            let (t, _) = evaluate(cfg, p, &d.tokenizer, tune, Some(&eval_tag))?;
            let (h, _) = evaluate(cfg, p, &d.tokenizer, ctx.heldout, Some(&eval_tag))?;
            scores.push((step, t, h));
        }
        Ok(())
    };
    let trainable = if method == Method::Ocat {
        let plan = ocat_plan(cfg, &ctx.best_tag, tune.to_vec(), settings);
        ocat_finetune_observed(&pre.cat.params, &plan, &d.tokenizer, &mut observer)?.trainable
    } else {
        let pairs = retag(tune, &ctx.best_tag, &d.tokenizer)?;
        baseline_finetune_observed(&pre.cat.params, method, &pairs, &settings, &mut observer)?.trainable
    };
    Ok((trainable, scores))
}

pub fn sweep_methods(cfg: &ExperimentConfig) -> [Method; 4] {
    [
        Method::Ocat,
        Method::Full,
        Method::Adapter(cfg.sweep.adapter),
        Method::Lora(cfg.sweep.lora),
    ]
}

/// Grid over fine-tuning lr × steps for OCAT and the three baselines, each
/// starting from the CAT model. One run per (method, lr), scored at every
/// step milestone on the tuning set and the held-out set.
pub fn sweep_stability(cfg: &ExperimentConfig, pre: &Pretrained, ranked: &[(String, f64)]) -> Result<Report> {
    let ctx = sweep_context(cfg, pre, ranked)?;
    let mut milestones = cfg.sweep.steps.clone();
    milestones.sort_unstable();
    milestones.dedup();
    let mut report = Report::new(
        "sweep-stability",
        cfg,
        &[
            "method",
            "lr",
            "steps",
            "trainable",
            "tune_chrf",
            "heldout_chrf",
            "heldout_delta",
        ],
    );
    for method in sweep_methods(cfg) {
        for &lr in &cfg.sweep.lrs {
            let (trainable, scores) = milestone_run(cfg, pre, &ctx, method, lr, &milestones, ctx.tune)?;
            for (steps, t, h) in scores {
                report.rows.push(vec![
                    method.name().into(),
                    lr.into(),
                    steps.into(),
                    trainable.into(),
                    t.into(),
                    h.into(),
                    (h - ctx.ref_heldout).into(),
                ]);
            }
        }
    }
    Ok(report)
}

/// Fixed-setting comparison on the small tuning set: OCAT with its default
/// settings against full fine-tuning with `overfit_full`.
pub fn overfit_check(cfg: &ExperimentConfig, pre: &Pretrained, ranked: &[(String, f64)]) -> Result<Report> {
    let ctx = sweep_context(cfg, pre, ranked)?;
    let mut report = Report::new(
        "overfit",
        cfg,
        &["method", "lr", "steps", "tune_chrf", "heldout_chrf", "heldout_delta"],
    );
    let runs = [(Method::Ocat, cfg.ocat), (Method::Full, cfg.overfit_full)];
    for (method, s) in runs {
        let cfg_m = ExperimentConfig {
            ocat: FinetuneSettings { lr: s.lr, ..s },
            ..cfg.clone()
        };
        let (_, scores) = milestone_run(&cfg_m, pre, &ctx, method, s.lr, &[s.steps], ctx.tune)?;
        let (steps, t, h) = scores.last().copied().unwrap_or((0, f64::NAN, f64::NAN));
        report.rows.push(vec![
            method.name().into(),
            s.lr.into(),
            steps.into(),
            t.into(),
            h.into(),
            (h - ctx.ref_heldout).into(),
        ]);
    }
    Ok(report)
}

/// OCAT with the default settings on `n` sampled dev pairs for each `n`,
/// reporting held-out chrF and its change from the best pretrained tag.
pub fn sweep_finetune_size(
    cfg: &ExperimentConfig,
    pre: &Pretrained,
    ranked: &[(String, f64)],
    sizes: &[usize],
) -> Result<Report> {
    let mut report = Report::new("sweep-size", cfg, &["n", "heldout_chrf", "heldout_delta"]);
    if sizes.is_empty() {
        return Ok(report);
    }
    let ctx = sweep_context(cfg, pre, ranked)?;
    let pool = &pre.data.dev;
    for &n in sizes {
        if n == 0 || n > pool.len() {
            return Err(Error::InvalidArgument(format!(
                "fine-tune size {n} not in 1..={}",
                pool.len()
            )));
        }
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.ocat.seed ^ n as u64));
        let picked: Vec<CorpusRecord> = idx[..n].iter().map(|&i| pool[i].clone()).collect();
        let (_, scores) = milestone_run(cfg, pre, &ctx, Method::Ocat, cfg.ocat.lr, &[cfg.ocat.steps], &picked)?;
        let h = scores.last().map_or(f64::NAN, |s| s.2);
        report.rows.push(vec![n.into(), h.into(), (h - ctx.ref_heldout).into()]);
    }
    Ok(report)
}

/// Trainable parameter counts per method at the given architecture.
pub fn trainable_report(cfg: &ExperimentConfig, model: &ModelConfig, label: &str) -> Report {
    let mut report = Report::new("trainable", cfg, &["preset", "method", "trainable"]);
    let methods = if model.d_model >= 512 {
        [
            Method::Ocat,
            Method::Adapter(AdapterConfig::PAPER),
            Method::Lora(LoraConfig::PAPER),
            Method::Full,
        ]
    } else {
        sweep_methods(cfg)
    };
    for m in methods {
        report
            .rows
            .push(vec![label.into(), m.name().into(), m.trainable_count(model).into()]);
    }
    report
}

/// Canonical tag for a corpus name of the synthetic task.
pub fn tag_of(corpus: &str) -> String {
    tag_for_corpus(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A very small configuration that runs every pipeline stage in seconds.
    pub(crate) fn micro() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.name = "micro".into();
        cfg.task.vocab_size = 6;
        cfg.task.max_len = 4;
        for c in &mut cfg.task.corpora {
            c.size = 40;
        }
        cfg.dev_size = 12;
        cfg.test_size = 10;
        cfg.model = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            d_ffn: 16,
            n_heads: 2,
            head_dim: 8,
            max_len: 16,
            ..cfg.model
        };
        cfg.pretrain.steps = 20;
        cfg.pretrain.checkpoint_every = 5;
        cfg.pretrain.max_tokens = 256;
        cfg.decode.beam_size = 2;
        cfg.bootstrap_resamples = 100;
        cfg.ocat.steps = 5;
        cfg.overfit_full.steps = 5;
        cfg.sweep = SweepGrid {
            lrs: vec![1e-3, 1e-2],
            steps: vec![2, 4],
            tune_size: 4,
            heldout_size: 5,
            adapter: AdapterConfig { bottleneck_dim: 2 },
            lora: LoraConfig { rank: 2, alpha: 2.0 },
        };
        cfg.sizes = vec![1, 3];
        cfg
    }

    #[test]
    fn pipeline_shapes_and_determinism() {
        let cfg = micro();
        let pre = pretrain_all(&cfg).unwrap();
        assert_eq!(pre.cat.averaged_steps, [5, 10, 15, 20]);
        let exp = run_cat_experiment(&cfg, &pre).unwrap();
        assert_eq!(exp.report.rows.len(), 1 + 4 + 1);
        assert_eq!(exp.ranked.len(), 4);

        let sweep = sweep_stability(&cfg, &pre, &exp.ranked).unwrap();
        assert_eq!(sweep.rows.len(), 2 * 2 * 4);
        let sizes = sweep_finetune_size(&cfg, &pre, &exp.ranked, &cfg.sizes).unwrap();
        assert_eq!(sizes.rows.len(), 2);
        assert!(sweep_finetune_size(&cfg, &pre, &exp.ranked, &[])
            .unwrap()
            .rows
            .is_empty());
        let over = overfit_check(&cfg, &pre, &exp.ranked).unwrap();
        assert_eq!(over.rows.len(), 2);

        let again = pretrain_all(&cfg).unwrap();
        let exp2 = run_cat_experiment(&cfg, &again).unwrap();
        assert_eq!(exp.report, exp2.report);
        assert_eq!(sweep, sweep_stability(&cfg, &again, &exp2.ranked).unwrap());
        assert_eq!(exp.report.config_hash.len(), 16);
        assert!(exp.report.metric_signature.starts_with("chrF2|"));
    }

    #[test]
    fn paper_counts_report() {
        let cfg = ExperimentConfig::desk();
        let r = trainable_report(&cfg, &ModelConfig::paper_base(48_000), "paper");
        let counts: Vec<f64> = (0..4)
            .map(|i| r.get(i, "trainable").unwrap().as_f64().unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }
}
