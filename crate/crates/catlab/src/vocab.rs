//! Vocabulary files: `vocab.txt` lists one unit per line in id order, and
//! `vocab.json` next to it records the specials, tags, normalization and
//! merge table needed to rebuild the tokenizer.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use catlab_core::tokenizer::{Tokenizer, TokenizerModel, SPECIALS};
use serde::{Deserialize, Serialize};

pub const VOCAB_TXT: &str = "vocab.txt";
pub const VOCAB_JSON: &str = "vocab.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSidecar {
    pub specials: Vec<String>,
    pub tags: Vec<String>,
    pub normalization: String,
    pub merges: Vec<(String, String)>,
}

pub fn save_tokenizer(dir: &Path, tok: &Tokenizer) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = tok.vocab.units().join("\n");
    text.push('\n');
    fs::write(dir.join(VOCAB_TXT), text)?;
    let sidecar = VocabSidecar {
        specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
        tags: tok.vocab.tags().map(|(t, _)| t.to_string()).collect(),
        normalization: tok.model.normalization.clone(),
        merges: tok.model.merges.clone(),
    };
    fs::write(dir.join(VOCAB_JSON), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let txt = dir.join(VOCAB_TXT);
    let units: Vec<String> = fs::read_to_string(&txt)
        .with_context(|| format!("reading {}", txt.display()))?
        .lines()
        .map(str::to_string)
        .collect();
    let json = dir.join(VOCAB_JSON);
    let sidecar: VocabSidecar =
        serde_json::from_str(&fs::read_to_string(&json).with_context(|| format!("reading {}", json.display()))?)?;
    let n_special = sidecar.specials.len();
    ensure!(
        units.len() >= n_special + sidecar.tags.len()
            && units[..n_special] == sidecar.specials[..]
            && units[n_special..n_special + sidecar.tags.len()] == sidecar.tags[..],
        "{}: specials and tags do not match the sidecar",
        txt.display()
    );
    let model = TokenizerModel {
        normalization: sidecar.normalization,
        merges: sidecar.merges,
    };
    Ok(Tokenizer::from_parts(model, units, sidecar.tags.len())?)
}
