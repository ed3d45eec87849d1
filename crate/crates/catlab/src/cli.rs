//! Command-line driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use catlab_core::corpus::{
    build_mixture, register_domain_split, split_by_url_domain, MixtureSpec, TagOrigin, TagRegistry,
};
use catlab_core::decode::{decode_corpus, decode_untagged, DecodeConfig};
use catlab_core::experiment::{
    overfit_check, prepare_data, pretrain, rank_pretrained, run_cat_experiment, run_ocat, sweep_finetune_size,
    sweep_stability, trainable_report, ExperimentConfig, Pretrained, Report,
};
use catlab_core::finetune::{baseline_finetune, ocat_finetune, retag, FinetuneSettings, Method, OcatPlan, RowInit};
use catlab_core::model::ModelConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checks::{
    cat_scores, check_ocat_improvement, check_overfit, check_size, check_stability, check_tag_sensitivity, CheckResult,
    Thresholds,
};
use crate::report::{read_report, write_report};
use crate::tsv::{read_lines, read_tsv, write_jsonl, write_lines, write_tsv};
use crate::workdir::{load_config, Workdir, BASELINE_MODEL, CAT_MODEL, OCAT_MODEL};

#[derive(Debug, Parser)]
#[command(
    name = "catlab",
    version,
    about = "Corpus-aware training and single-row tag fine-tuning"
)]
pub struct Cli {
    /// Directory holding data, vocabulary, models and reports.
    #[arg(long, global = true, default_value = "work")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Experiment config (JSON). Defaults to the workdir's config.json, then the desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArg {
    /// Evaluate the acceptance checks for this step and exit nonzero on failure.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus utilities.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Generate the synthetic corpora, held-out sets, mixture and vocabulary.
    Synth(ConfigArg),
    /// Train the tagged (CAT) and the untagged baseline model.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Train only one of the two models.
        #[arg(long, value_enum)]
        only: Option<PretrainKind>,
    },
    /// Train a single model with overridden steps and seed.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        /// Train without corpus tags.
        #[arg(long)]
        untagged: bool,
        /// Output model name under models/ (defaults to cat or baseline).
        #[arg(long)]
        name: Option<String>,
    },
    /// Rank the corpus tags of the CAT model by dev chrF.
    RankTags(ConfigArg),
    /// Fine-tune the designated tag row on the configured data.
    Ocat {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Fine-tune with one method on a TSV file.
    Finetune(FinetuneArgs),
    /// Compare OCAT and full fine-tuning on a small tuning set, plus trainable counts.
    Baselines {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        check: CheckArg,
    },
    /// Grid over fine-tuning lr and steps for every method.
    SweepStability {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        check: CheckArg,
    },
    /// OCAT held-out deltas as a function of fine-tune set size.
    SweepSize {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated sizes; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[command(flatten)]
        check: CheckArg,
    },
    /// Score baseline, every CAT tag and OCAT on dev and test, and re-check saved reports.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        check: CheckArg,
    },
    /// Translate a file, one segment per line.
    Decode {
        /// Inference tag; omit with --untagged.
        #[arg(long)]
        tag: Option<String>,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Model name under models/.
        #[arg(long, default_value = OCAT_MODEL)]
        model: String,
        #[arg(long)]
        untagged: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PretrainKind {
    Cat,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneMethod {
    Ocat,
    Full,
    Adapter,
    Lora,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(value_enum)]
    pub method: FinetuneMethod,
    /// Fine-tuning pairs (TSV).
    #[arg(long)]
    pub data: PathBuf,
    /// Tag appended to every source: the trained row for OCAT, the conditioning tag otherwise.
    #[arg(long)]
    pub tag: String,
    /// OCAT row initialization: a tag to copy, `random` or `keep`.
    #[arg(long, default_value = "keep")]
    pub init_from: String,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub lr: f64,
    #[arg(long, default_value_t = 512)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model to start from.
    #[arg(long, default_value = CAT_MODEL)]
    pub from_model: String,
    /// Output model name (defaults to the method name).
    #[arg(long)]
    pub out: Option<String>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Re-tag a crawled corpus by URL domain, keeping the top-K domains.
    SplitByDomain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        corpus_id: String,
        #[arg(long)]
        top_k: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cap every corpus, merge and shuffle. Corpus ids come from the file stems.
    BuildMixture {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        cap: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Runs a parsed command. The returned check results are empty unless a
/// `--check` flag was given.
pub fn run(cli: Cli) -> Result<Vec<CheckResult>> {
    let wd = Workdir::new(&cli.workdir);
    let thresholds = Thresholds::default();
    match cli.command {
        Command::Corpus(c) => corpus(c).map(|_| Vec::new()),
        Command::Synth(c) => {
            let cfg = resolve_config(&wd, &c)?;
            synth(&wd, &cfg)?;
            Ok(Vec::new())
        }
        Command::Pretrain { config, only } => {
            let cfg = ensure_data(&wd, &config)?;
            let data = wd.load_data()?;
            for (kind, tagged, name) in [
                (PretrainKind::Cat, true, CAT_MODEL),
                (PretrainKind::Baseline, false, BASELINE_MODEL),
            ] {
                if only.is_none_or(|o| o == kind) {
                    log::info!("training `{name}` for {} steps", cfg.pretrain.steps);
                    let m = pretrain(&cfg, &data, tagged)?;
                    wd.save_trained(
                        name,
                        &m,
                        if tagged {
                            "tagged pretraining"
                        } else {
                            "untagged pretraining"
                        },
                    )?;
                }
            }
            Ok(Vec::new())
        }
        Command::Train {
            config,
            steps,
            seed,
            untagged,
            name,
        } => {
            let mut cfg = ensure_data(&wd, &config)?;
            cfg.pretrain.steps = steps;
            cfg.pretrain.seed = seed;
            let data = wd.load_data()?;
            let m = pretrain(&cfg, &data, !untagged)?;
            let name = name.unwrap_or_else(|| (if untagged { BASELINE_MODEL } else { CAT_MODEL }).into());
            wd.save_trained(
                &name,
                &m,
                &format!("train steps={steps} seed={seed} tagged={}", !untagged),
            )?;
            Ok(Vec::new())
        }
        Command::RankTags(c) => {
            let cfg = resolve_config(&wd, &c)?;
            let pre = wd.load_pretrained()?;
            let ranked = rank_pretrained(&cfg, &pre)?;
            let mut report = Report::new("rank-tags", &cfg, &["rank", "tag", "dev_chrf"]);
            for (i, (tag, score)) in ranked.into_iter().enumerate() {
                report.rows.push(vec![(i + 1).into(), tag.into(), score.into()]);
            }
            emit(&wd, "rank-tags", &report)?;
            Ok(Vec::new())
        }
        Command::Ocat { config } => {
            let cfg = resolve_config(&wd, &config)?;
            let pre = wd.load_pretrained()?;
            let ranked = rank_pretrained(&cfg, &pre)?;
            let params = run_ocat(&cfg, &pre, &ranked)?;
            wd.save_params(
                OCAT_MODEL,
                &params,
                cfg.ocat.steps,
                &format!("ocat tag {} from {}", cfg.hq_tag, ranked[0].0),
            )?;
            Ok(Vec::new())
        }
        Command::Finetune(args) => finetune(&wd, args).map(|_| Vec::new()),
        Command::Baselines { config, check } => {
            let (cfg, pre, ranked) = load_all(&wd, &config)?;
            let report = overfit_check(&cfg, &pre, &ranked)?;
            emit(&wd, "baselines", &report)?;
            let model = pre.cat.params.config.clone();
            emit(&wd, "trainable-desk", &trainable_report(&cfg, &model, "desk"))?;
            emit(
                &wd,
                "trainable-paper",
                &trainable_report(&cfg, &ModelConfig::paper_base(48_000), "paper"),
            )?;
            Ok(if check.check {
                vec![check_overfit(&report, &thresholds)]
            } else {
                Vec::new()
            })
        }
        Command::SweepStability { config, check } => {
            let (cfg, pre, ranked) = load_all(&wd, &config)?;
            let report = sweep_stability(&cfg, &pre, &ranked)?;
            emit(&wd, "sweep-stability", &report)?;
            Ok(if check.check {
                vec![check_stability(&report, &thresholds)]
            } else {
                Vec::new()
            })
        }
        Command::SweepSize { config, sizes, check } => {
            let (cfg, pre, ranked) = load_all(&wd, &config)?;
            let sizes = sizes.unwrap_or_else(|| cfg.sizes.clone());
            let report = sweep_finetune_size(&cfg, &pre, &ranked, &sizes)?;
            emit(&wd, "sweep-size", &report)?;
            Ok(if check.check {
                vec![check_size(&report, &thresholds)]
            } else {
                Vec::new()
            })
        }
        Command::Report { config, check } => {
            let cfg = resolve_config(&wd, &config)?;
            let pre = wd.load_pretrained()?;
            let exp = run_cat_experiment(&cfg, &pre)?;
            emit(&wd, "cat", &exp.report)?;
            wd.save_params(
                OCAT_MODEL,
                &exp.ocat,
                cfg.ocat.steps,
                &format!("ocat tag {}", cfg.hq_tag),
            )?;
            if !check.check {
                return Ok(Vec::new());
            }
            Ok(report_checks(&wd, &cfg, &exp.report, &thresholds))
        }
        Command::Decode {
            tag,
            beam,
            input,
            output,
            model,
            untagged,
        } => {
            let tok = crate::vocab::load_tokenizer(&wd.vocab())?;
            let params = wd.load_params(&model)?;
            let lines = read_lines(&input)?;
            let hyps = match (tag, untagged) {
                (Some(t), false) => decode_corpus(&params, &lines, &DecodeConfig::new(t).with_beam(beam), &tok)?,
                (None, true) => decode_untagged(&params, &lines, &DecodeConfig::new("").with_beam(beam), &tok)?,
                _ => bail!("give exactly one of --tag or --untagged"),
            };
            write_lines(&output, &hyps)?;
            Ok(Vec::new())
        }
    }
}

/// Checks on the CAT report plus any saved sweep reports in the workdir.
fn report_checks(wd: &Workdir, cfg: &ExperimentConfig, cat: &Report, t: &Thresholds) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let (clean, misaligned) = corpus_roles(cfg);
    match cat_scores(cat, &clean, &misaligned) {
        Some(s) => {
            out.push(check_tag_sensitivity(&s, t));
            out.push(check_ocat_improvement(&s, t));
        }
        None => out.push(CheckResult {
            name: "cat-report".into(),
            passed: false,
            detail: "missing clean/misaligned/baseline/ocat rows".into(),
        }),
    }
    type Check = fn(&Report, &Thresholds) -> CheckResult;
    let saved: [(&str, Check); 3] = [
        ("baselines", check_overfit),
        ("sweep-stability", check_stability),
        ("sweep-size", check_size),
    ];
    for (stem, check) in saved {
        let path = wd.reports().join(format!("{stem}.json"));
        if let Ok(r) = read_report(&path) {
            out.push(check(&r, t));
        }
    }
    out
}

/// Names of the noise-free corpus and the misaligned corpus in the config.
pub fn corpus_roles(cfg: &ExperimentConfig) -> (String, String) {
    use catlab_core::synth::NoiseKind;
    let find = |pred: fn(&NoiseKind) -> bool| {
        cfg.task
            .corpora
            .iter()
            .find(|c| pred(&c.noise))
            .map(|c| c.name.clone())
            .unwrap_or_default()
    };
    (
        find(|n| matches!(n, NoiseKind::None)),
        find(|n| matches!(n, NoiseKind::Misaligned)),
    )
}

fn emit(wd: &Workdir, stem: &str, report: &Report) -> Result<()> {
    write_report(&wd.reports(), stem, report)?;
    println!("{}", crate::report::to_tsv(report));
    Ok(())
}

fn resolve_config(wd: &Workdir, c: &ConfigArg) -> Result<ExperimentConfig> {
    let saved = wd.root.join("config.json");
    match (&c.config, saved.exists()) {
        (Some(p), _) => load_config(Some(p)),
        (None, true) => load_config(Some(&saved)),
        (None, false) => load_config(None),
    }
}

fn synth(wd: &Workdir, cfg: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    wd.save_config(cfg)?;
    wd.save_data(&data)?;
    log::info!(
        "wrote {} mixture records, vocabulary of {} units",
        data.mixture.len(),
        data.tokenizer.vocab.size()
    );
    Ok(())
}

/// Resolves the config and generates data when the workdir has none yet.
fn ensure_data(wd: &Workdir, c: &ConfigArg) -> Result<ExperimentConfig> {
    let cfg = resolve_config(wd, c)?;
    if !wd.has_data() {
        synth(wd, &cfg)?;
    }
    Ok(cfg)
}

type Loaded = (ExperimentConfig, Pretrained, Vec<(String, f64)>);

fn load_all(wd: &Workdir, c: &ConfigArg) -> Result<Loaded> {
    let cfg = resolve_config(wd, c)?;
    let pre = wd.load_pretrained()?;
    let ranked = rank_pretrained(&cfg, &pre)?;
    Ok((cfg, pre, ranked))
}

fn finetune(wd: &Workdir, a: FinetuneArgs) -> Result<()> {
    let cfg = resolve_config(wd, &a.config)?;
    let tok = crate::vocab::load_tokenizer(&wd.vocab())?;
    let params = wd.load_params(&a.from_model)?;
    let (records, stats) = read_tsv(&a.data, "finetune")?;
    ensure!(
        !records.is_empty(),
        "{}: no usable records ({} malformed)",
        a.data.display(),
        stats.malformed
    );
    let settings = FinetuneSettings {
        steps: a.steps,
        lr: a.lr,
        max_tokens: a.max_tokens,
        seed: a.seed,
    };
    let method = match a.method {
        FinetuneMethod::Ocat => Method::Ocat,
        FinetuneMethod::Full => Method::Full,
        FinetuneMethod::Adapter => Method::Adapter(cfg.sweep.adapter),
        FinetuneMethod::Lora => Method::Lora(cfg.sweep.lora),
    };
    let out = if method == Method::Ocat {
        let plan = OcatPlan {
            target_tag: a.tag.clone(),
            init_from: RowInit::parse(&a.init_from),
            finetune_data: records,
            settings,
        };
        ocat_finetune(&params, &plan, &tok)?
    } else {
        let pairs = retag(&records, &a.tag, &tok)?;
        baseline_finetune(&params, method, &pairs, &settings)?
    };
    let name = a.out.unwrap_or_else(|| method.name().to_string());
    let note = format!(
        "{method} tag={} steps={} lr={} from={}",
        a.tag, a.steps, a.lr, a.from_model
    );
    wd.save_params(&name, &out.params, a.steps, &note)?;
    log::info!("{name}: {} trainable parameters", out.trainable);
    Ok(())
}

fn corpus(c: CorpusCommand) -> Result<()> {
    match c {
        CorpusCommand::SplitByDomain {
            input,
            corpus_id,
            top_k,
            out_dir,
        } => {
            let (records, stats) = read_tsv(&input, &corpus_id)?;
            let split = split_by_url_domain(records, top_k)?;
            let mut registry = TagRegistry::new();
            register_domain_split(&mut registry, &split)?;
            fs::create_dir_all(&out_dir)?;
            for (tag, recs) in &split {
                let id = registry.corpus_for(tag)?;
                write_tsv(&out_dir.join(format!("{id}.tsv")), recs)?;
            }
            fs::write(out_dir.join("registry.json"), serde_json::to_string_pretty(&registry)?)?;
            println!(
                "{} records ({} malformed) into {} sub-corpora",
                stats.records,
                stats.malformed,
                split.len()
            );
            Ok(())
        }
        CorpusCommand::BuildMixture {
            input,
            cap,
            seed,
            out_dir,
        } => {
            let mut registry = TagRegistry::new();
            let mut corpora = BTreeMap::new();
            for path in &input {
                let id = corpus_id_of(path)?;
                let (records, _) = read_tsv(path, &id)?;
                let tag = registry.register(&id, TagOrigin::NamedCorpus)?;
                corpora.insert(tag, records);
            }
            let spec = MixtureSpec {
                per_tag_cap: cap,
                shuffle_seed: seed,
            };
            let (mixture, manifest) = build_mixture(&corpora, &registry, &spec)?;
            fs::create_dir_all(&out_dir)?;
            write_jsonl(&out_dir.join("mixture.jsonl"), &mixture)?;
            fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            fs::write(out_dir.join("registry.json"), serde_json::to_string_pretty(&registry)?)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
            Ok(())
        }
    }
}

fn corpus_id_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("{}: cannot derive a corpus id from the file name", path.display()))
}
