//! On-disk layout shared by the CLI verbs.
//!
//! ```text
//! <workdir>/
//!   config.json            experiment config used to create the data
//!   data/corpora/<id>.tsv  one file per synthetic corpus
//!   data/registry.json     corpus id <-> tag table
//!   data/mixture.jsonl     capped, shuffled training mixture
//!   data/manifest.json     mixture accounting
//!   data/dev.tsv data/test.tsv
//!   vocab/vocab.txt vocab/vocab.json
//!   models/<name>/         checkpoint directories (cat, baseline, ocat, ...)
//!   reports/               TSV + JSON reports
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use catlab_core::corpus::{MixtureManifest, TagRegistry};
use catlab_core::experiment::{ExperimentConfig, PreparedData, Pretrained, TrainedModel};
use catlab_core::model::Parameters;

use crate::checkpoint::{load_model_dir, read_meta, save_model_dir};
use crate::tsv::{read_jsonl, read_tsv, write_jsonl, write_tsv};
use crate::vocab::{load_tokenizer, save_tokenizer};

pub const CAT_MODEL: &str = "cat";
pub const BASELINE_MODEL: &str = "baseline";
pub const OCAT_MODEL: &str = "ocat";

#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn has_data(&self) -> bool {
        self.data().join("manifest.json").exists() && self.vocab().join("vocab.txt").exists()
    }

    pub fn has_model(&self, name: &str) -> bool {
        self.model(name).join("meta.json").exists()
    }

    pub fn save_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.root.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        Ok(())
    }

    pub fn save_data(&self, data: &PreparedData) -> Result<()> {
        let d = self.data();
        fs::create_dir_all(d.join("corpora"))?;
        for entry in data.registry.entries() {
            write_tsv(
                &d.join("corpora").join(format!("{}.tsv", entry.corpus_id)),
                &data.corpora[&entry.tag],
            )?;
        }
        fs::write(d.join("registry.json"), serde_json::to_string_pretty(&data.registry)?)?;
        write_jsonl(&d.join("mixture.jsonl"), &data.mixture)?;
        fs::write(d.join("manifest.json"), serde_json::to_string_pretty(&data.manifest)?)?;
        write_tsv(&d.join("dev.tsv"), &data.dev)?;
        write_tsv(&d.join("test.tsv"), &data.test)?;
        save_tokenizer(&self.vocab(), &data.tokenizer)
    }

    pub fn load_data(&self) -> Result<PreparedData> {
        let d = self.data();
        let registry: TagRegistry = serde_json::from_str(
            &fs::read_to_string(d.join("registry.json")).context("reading registry.json (run `synth` first)")?,
        )?;
        let mut corpora = BTreeMap::new();
        for entry in registry.entries() {
            let (records, _) = read_tsv(
                &d.join("corpora").join(format!("{}.tsv", entry.corpus_id)),
                &entry.corpus_id,
            )?;
            corpora.insert(entry.tag.clone(), records);
        }
        let manifest: MixtureManifest = serde_json::from_str(&fs::read_to_string(d.join("manifest.json"))?)?;
        Ok(PreparedData {
            corpora,
            mixture: read_jsonl(&d.join("mixture.jsonl"))?,
            manifest,
            dev: read_tsv(&d.join("dev.tsv"), "dev")?.0,
            test: read_tsv(&d.join("test.tsv"), "test")?.0,
            tokenizer: load_tokenizer(&self.vocab())?,
            registry,
        })
    }

    pub fn save_trained(&self, name: &str, model: &TrainedModel, note: &str) -> Result<()> {
        let step = model.checkpoints.last().map_or(0, |c| c.step);
        // The averaged model gets its own step number past the last raw checkpoint.
        let model_step = if model.averaged_steps.len() > 1 { step + 1 } else { step };
        save_model_dir(
            &self.model(name),
            &model.params,
            model_step,
            &model.checkpoints,
            &model.averaged_steps,
            note,
        )?;
        Ok(())
    }

    pub fn save_params(&self, name: &str, params: &Parameters<f32>, step: usize, note: &str) -> Result<()> {
        save_model_dir(&self.model(name), params, step, &[], &[], note)?;
        Ok(())
    }

    pub fn load_params(&self, name: &str) -> Result<Parameters<f32>> {
        load_model_dir(&self.model(name)).with_context(|| format!("loading model `{name}`"))
    }

    fn load_trained(&self, name: &str) -> Result<TrainedModel> {
        let meta = read_meta(&self.model(name))?;
        Ok(TrainedModel {
            params: self.load_params(name)?,
            log: Vec::new(),
            averaged_steps: meta.averaged_from,
            checkpoints: Vec::new(),
        })
    }

    /// Data plus both pretrained models, as written by `synth` and `pretrain`.
    pub fn load_pretrained(&self) -> Result<Pretrained> {
        Ok(Pretrained {
            data: self.load_data()?,
            cat: self.load_trained(CAT_MODEL)?,
            baseline: self.load_trained(BASELINE_MODEL)?,
        })
    }
}

/// Reads an experiment config from JSON; `None` gives the desk preset.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ExperimentConfig::desk()),
    }
}
