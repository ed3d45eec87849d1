//! Joint source+target BPE vocabulary.
//!
//! Id layout: `0..4` are PAD, BOS, EOS, UNK; the reserved tag tokens follow as
//! one contiguous block; then the base characters (including the word-start
//! marker `▁`) in code-point order; then merged units in merge order.
//!
//! Tag and special strings are never produced by segmentation. They can only
//! enter a sequence through explicit injection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const WORD_START: char = '\u{2581}';

/// Identifier of the normalization applied before segmentation.
pub const NORMALIZATION: &str = "nfc+collapse-ws";

/// NFC, whitespace runs collapsed to a single space, trimmed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    units: Vec<String>,
    num_tags: usize,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from its full unit list. The first four units must be
    /// the specials and the next `num_tags` the reserved tags.
    pub fn from_units(units: Vec<String>, num_tags: usize) -> Result<Self> {
        if units.len() < SPECIALS.len() + num_tags {
            return Err(Error::InvalidArgument(
                "vocabulary shorter than its reserved block".into(),
            ));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if units[i] != *s {
                return Err(Error::InvalidArgument(format!(
                    "id {i} must be {s}, found {}",
                    units[i]
                )));
            }
        }
        let mut index = BTreeMap::new();
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate unit `{u}`")));
            }
        }
        Ok(Vocabulary { units, num_tags, index })
    }

    pub fn size(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn id(&self, unit: &str) -> Option<u32> {
        self.index.get(unit).copied()
    }

    pub fn unit(&self, id: u32) -> Option<&str> {
        self.units.get(id as usize).map(String::as_str)
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    /// Id range of the reserved tag block.
    pub fn tag_range(&self) -> core::ops::Range<u32> {
        let start = SPECIALS.len() as u32;
        start..start + self.num_tags as u32
    }

    pub fn tags(&self) -> impl Iterator<Item = (&str, u32)> {
        self.tag_range().map(|id| (self.units[id as usize].as_str(), id))
    }

    pub fn tag_id(&self, tag: &str) -> Option<u32> {
        self.id(tag).filter(|id| self.is_tag(*id))
    }

    pub fn is_tag(&self, id: u32) -> bool {
        self.tag_range().contains(&id)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Specials and tags: ids that segmentation never emits.
    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len() + self.num_tags
    }
}

/// Merge table sufficient to segment text deterministically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerModel {
    pub normalization: String,
    /// Merges in priority order, as (left, right) unit strings.
    pub merges: Vec<(String, String)>,
}

/// A trained model together with its vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub model: TokenizerModel,
    pub vocab: Vocabulary,
    // (left id, right id) -> (rank, merged id)
    merge_table: BTreeMap<(u32, u32), (u32, u32)>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.model == other.model && self.vocab == other.vocab
    }
}

fn word_symbols(word: &str) -> impl Iterator<Item = String> + '_ {
    core::iter::once(WORD_START.to_string()).chain(word.chars().map(|c| c.to_string()))
}

/// Trains a BPE vocabulary of `vocab_size` entries (specials and `reserved`
/// tags included). Pairs are merged by descending frequency, ties broken by
/// the lexicographically smallest (left, right) pair; a merge whose result
/// would spell a reserved string is skipped. Training stops early, with a
/// smaller vocabulary, once no adjacent pair remains.
pub fn train_subword<S: AsRef<str>>(corpus_text: &[S], vocab_size: usize, reserved: &[String]) -> Result<Tokenizer> {
    let mut words: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus_text {
        for w in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            *words.entry(w.to_string()).or_default() += 1;
        }
    }

    let mut forbidden: BTreeSet<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    for r in reserved {
        if !forbidden.insert(r.clone()) {
            return Err(Error::DuplicateTag(r.clone()));
        }
    }

    let mut chars: BTreeSet<char> = BTreeSet::new();
    chars.insert(WORD_START);
    for w in words.keys() {
        chars.extend(w.chars());
    }
    let required = SPECIALS.len() + reserved.len() + chars.len();
    if vocab_size <= required {
        return Err(Error::VocabTooSmall {
            requested: vocab_size,
            required,
        });
    }

    let mut units: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    units.extend(reserved.iter().cloned());
    let mut lookup: BTreeMap<String, u32> = BTreeMap::new();
    for c in &chars {
        let s = c.to_string();
        // A single-character tag would collide with a base character.
        if forbidden.contains(&s) {
            return Err(Error::InvalidArgument(format!(
                "reserved string `{s}` is a single character"
            )));
        }
        lookup.insert(s.clone(), units.len() as u32);
        units.push(s);
    }

    let mut seqs: Vec<(Vec<u32>, usize)> = words
        .iter()
        .map(|(w, &n)| (word_symbols(w).map(|s| lookup[&s]).collect(), n))
        .collect();

    let mut merges = Vec::new();
    while units.len() < vocab_size {
        let mut pair_counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for (seq, n) in &seqs {
            for w in seq.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let mut best: Option<((u32, u32), usize, String)> = None;
        for (&(a, b), &n) in &pair_counts {
            let merged = format!("{}{}", units[a as usize], units[b as usize]);
            if forbidden.contains(&merged) || lookup.contains_key(&merged) {
                continue;
            }
            let better = match &best {
                None => true,
                Some(((ba, bb), bn, _)) => {
                    n > *bn
                        || (n == *bn
                            && (units[a as usize].as_str(), units[b as usize].as_str())
                                < (units[*ba as usize].as_str(), units[*bb as usize].as_str()))
                }
            };
            if better {
                best = Some(((a, b), n, merged));
            }
        }
        let Some(((a, b), _, merged)) = best else { break };
        let id = units.len() as u32;
        lookup.insert(merged.clone(), id);
        units.push(merged);
        merges.push((units[a as usize].clone(), units[b as usize].clone()));
        for (seq, _) in &mut seqs {
            apply_merge(seq, a, b, id);
        }
    }

    let model = TokenizerModel {
        normalization: NORMALIZATION.to_string(),
        merges,
    };
    let vocab = Vocabulary::from_units(units, reserved.len())?;
    Tokenizer::new(model, vocab)
}

fn apply_merge(seq: &mut Vec<u32>, a: u32, b: u32, merged: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
            seq[out] = merged;
            i += 2;
        } else {
            seq[out] = seq[i];
            i += 1;
        }
        out += 1;
    }
    seq.truncate(out);
}

impl Tokenizer {
    pub fn new(model: TokenizerModel, vocab: Vocabulary) -> Result<Self> {
        let mut merge_table = BTreeMap::new();
        for (rank, (l, r)) in model.merges.iter().enumerate() {
            let missing = |u: &str| Error::InvalidArgument(format!("merge references unknown unit `{u}`"));
            let li = vocab.id(l).ok_or_else(|| missing(l))?;
            let ri = vocab.id(r).ok_or_else(|| missing(r))?;
            let merged = format!("{l}{r}");
            let mi = vocab.id(&merged).ok_or_else(|| missing(&merged))?;
            merge_table.insert((li, ri), (rank as u32, mi));
        }
        Ok(Tokenizer {
            model,
            vocab,
            merge_table,
        })
    }

    /// Rebuilds the unit index after deserialization.
    pub fn from_parts(model: TokenizerModel, units: Vec<String>, num_tags: usize) -> Result<Self> {
        Self::new(model, Vocabulary::from_units(units, num_tags)?)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let norm = normalize(text);
        let mut out = Vec::new();
        for word in norm.split(' ').filter(|w| !w.is_empty()) {
            let mut seq: Vec<u32> = word_symbols(word)
                .map(|s| match self.vocab.id(&s) {
                    Some(id) if !self.vocab.is_reserved(id) => id,
                    _ => UNK,
                })
                .collect();
            loop {
                let best = seq
                    .windows(2)
                    .filter_map(|w| {
                        self.merge_table
                            .get(&(w[0], w[1]))
                            .map(|&(rank, id)| (rank, w[0], w[1], id))
                    })
                    .min();
                let Some((_, a, b, id)) = best else { break };
                apply_merge(&mut seq, a, b, id);
            }
            out.extend(seq);
        }
        out
    }

    /// Concatenates units, turning word-start markers back into spaces.
    /// Specials and tags are dropped; UNK renders as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == UNK {
                s.push_str(SPECIALS[UNK as usize]);
                continue;
            }
            if self.vocab.is_reserved(id) {
                continue;
            }
            if let Some(u) = self.vocab.unit(id) {
                s.push_str(u);
            }
        }
        let spaced: String = s.chars().map(|c| if c == WORD_START { ' ' } else { c }).collect();
        normalize(&spaced)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn corpus() -> Vec<&'static str> {
        vec![
            "the cat sat on the mat",
            "le chat est assis sur le tapis",
            "the dog sat on the log",
            "le chien est assis sur la bûche",
        ]
    }

    #[test]
    fn specials_then_tags() {
        let tags = vec!["<OPUS-v1>".to_string(), "<HQ>".to_string()];
        let tok = train_subword(&corpus(), 60, &tags).unwrap();
        assert_eq!(tok.vocab.unit(PAD), Some("<pad>"));
        assert_eq!(tok.vocab.unit(BOS), Some("<s>"));
        assert_eq!(tok.vocab.unit(EOS), Some("</s>"));
        assert_eq!(tok.vocab.unit(UNK), Some("<unk>"));
        assert_eq!(tok.vocab.tag_id("<OPUS-v1>"), Some(4));
        assert_eq!(tok.vocab.tag_id("<HQ>"), Some(5));
        assert_eq!(tok.vocab.tag_id("</s>"), None);
        assert_eq!(tok.vocab.size(), 60);
    }

    #[test]
    fn most_frequent_pair_merges_first() {
        let tok = train_subword(&["aaab aaab"], 4 + 3 + 1, &[]).unwrap();
        assert_eq!(tok.model.merges[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        let err = train_subword(&["ab"], 7, &[]).unwrap_err();
        // 4 specials + {▁, a, b}
        assert_eq!(
            err,
            Error::VocabTooSmall {
                requested: 7,
                required: 7
            }
        );
    }

    #[test]
    fn stops_when_no_pairs_remain() {
        let tok = train_subword(&["ab"], 100, &[]).unwrap();
        // ▁a, ▁ab
        assert_eq!(tok.vocab.size(), 4 + 3 + 2);
    }

    #[test]
    fn literal_tag_text_never_yields_tag_ids() {
        let tags = vec!["<HQ>".to_string()];
        let text = ["x<HQ> <HQ> <HQ>x <HQ><HQ>"];
        let tok = train_subword(&text, 200, &tags).unwrap();
        assert!(tok.vocab.units()[5..].iter().all(|u| u != "<HQ>"));
        let ids = tok.encode(text[0]);
        assert!(ids.iter().all(|&id| !tok.vocab.is_reserved(id)));
        assert_eq!(tok.decode(&ids), text[0]);
    }

    #[test]
    fn deterministic_training() {
        let a = train_subword(&corpus(), 60, &[]).unwrap();
        let b = train_subword(&corpus(), 60, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_decode_basics() {
        let tok = train_subword(&corpus(), 60, &[]).unwrap();
        assert!(tok.encode("").is_empty());
        assert!(tok.encode("   ").is_empty());
        assert_eq!(tok.decode(&tok.encode("the cat")), "the cat");
        let ids = tok.encode("the zebra");
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn normalization_collapses_whitespace_and_composes() {
        assert_eq!(normalize("  a \t\n b  "), "a b");
        assert_eq!(normalize("e\u{301}"), "\u{e9}");
    }

    proptest! {
        #[test]
        fn round_trips_training_corpus(lines in proptest::collection::vec("[a-e ]{0,12}", 1..8)) {
            let tok = train_subword(&lines, 40, &[]).unwrap();
            for l in &lines {
                prop_assert_eq!(tok.decode(&tok.encode(l)), normalize(l));
            }
        }
    }
}
