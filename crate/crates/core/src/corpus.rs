//! Parallel-corpus records, corpus tags, URL-domain splitting, capped mixtures
//! and tag injection.
//!
//! A corpus tag is a reserved vocabulary token of the form `<{corpus_id}>`.
//! Training examples carry their tag as the last source token before EOS.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hash::fnv64;
use crate::tokenizer::{Tokenizer, EOS};
use crate::{Error, Result};

/// One parallel sentence pair with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub source: String,
    pub target: String,
    pub corpus_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl CorpusRecord {
    pub fn new(source: impl Into<String>, target: impl Into<String>, corpus_id: impl Into<String>) -> Self {
        CorpusRecord {
            source: source.into(),
            target: target.into(),
            corpus_id: corpus_id.into(),
            url: None,
        }
    }

    pub fn with_url(mut self, url: impl Into<String>) -> Self {
        self.url = Some(url.into());
        self
    }
}

/// Outcome of parsing one TSV line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TsvLine {
    Record(CorpusRecord),
    /// Fewer than two fields, or a side that is blank after trimming.
    Malformed,
    Blank,
}

/// Parses `source \t target [\t url]`. Extra columns past the url are ignored.
pub fn parse_tsv_line(line: &str, corpus_id: &str) -> TsvLine {
    let line = line.trim_end_matches(['\n', '\r']);
    if line.trim().is_empty() {
        return TsvLine::Blank;
    }
    let mut fields = line.split('\t');
    let source = fields.next().unwrap_or("").trim();
    let Some(target) = fields.next().map(str::trim) else {
        return TsvLine::Malformed;
    };
    if source.is_empty() || target.is_empty() {
        return TsvLine::Malformed;
    }
    let url = fields.next().map(str::trim).filter(|u| !u.is_empty());
    TsvLine::Record(CorpusRecord {
        source: source.to_string(),
        target: target.to_string(),
        corpus_id: corpus_id.to_string(),
        url: url.map(str::to_string),
    })
}

/// Where a tag came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TagOrigin {
    NamedCorpus,
    UrlDomain,
    Synthetic,
    Hq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagEntry {
    pub corpus_id: String,
    pub tag: String,
    pub origin: TagOrigin,
}

/// Ordered inventory of corpus tags. Each corpus id maps to exactly one tag.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRegistry {
    entries: Vec<TagEntry>,
}

/// Canonical tag token for a corpus id.
pub fn tag_for_corpus(corpus_id: &str) -> String {
    format!("<{corpus_id}>")
}

impl TagRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `corpus_id` and returns its tag. Re-registering the same id
    /// with the same origin is a no-op.
    pub fn register(&mut self, corpus_id: &str, origin: TagOrigin) -> Result<String> {
        if corpus_id.is_empty() || corpus_id.contains(['<', '>']) || corpus_id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad corpus id `{corpus_id}`")));
        }
        let tag = tag_for_corpus(corpus_id);
        if let Some(e) = self.entries.iter().find(|e| e.corpus_id == corpus_id) {
            if e.origin == origin {
                return Ok(tag);
            }
            return Err(Error::DuplicateTag(tag));
        }
        self.entries.push(TagEntry {
            corpus_id: corpus_id.to_string(),
            tag: tag.clone(),
            origin,
        });
        Ok(tag)
    }

    pub fn tag_for(&self, corpus_id: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|e| e.corpus_id == corpus_id)
            .map(|e| e.tag.as_str())
            .ok_or_else(|| Error::UnknownCorpus(corpus_id.to_string()))
    }

    pub fn corpus_for(&self, tag: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|e| e.tag == tag)
            .map(|e| e.corpus_id.as_str())
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    pub fn contains_tag(&self, tag: &str) -> bool {
        self.entries.iter().any(|e| e.tag == tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.tag.as_str())
    }

    pub fn entries(&self) -> &[TagEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Position of a tag in registration order (used as a stable tie-breaker).
    pub fn position(&self, tag: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.tag == tag)
    }
}

// Second-level registries where the registrable label sits one level deeper.
const TWO_LEVEL_SUFFIXES: &[&str] = &[
    "ac.uk", "co.uk", "gov.uk", "org.uk", "com.au", "net.au", "org.au", "co.jp", "ne.jp", "or.jp", "co.kr", "co.nz",
    "com.br", "com.cn", "edu.cn", "gov.cn", "net.cn", "org.cn", "com.hk", "com.tw", "org.tw", "com.sg", "com.mx",
    "co.in", "co.za",
];

/// Extracts the registrable second-level label of a URL's host, lowercased:
/// `http://www.baunat.com/en` gives `baunat`, `shop.example.co.uk` gives `example`.
pub fn url_domain(url: &str) -> Option<String> {
    let rest = match url.find("://") {
        Some(i) => &url[i + 3..],
        None => url.trim_start_matches("//"),
    };
    let host_end = rest.find(['/', '?', '#']).unwrap_or(rest.len());
    let mut host = &rest[..host_end];
    if let Some(at) = host.rfind('@') {
        host = &host[at + 1..];
    }
    if let Some(colon) = host.find(':') {
        host = &host[..colon];
    }
    let host = host.trim_end_matches('.').to_lowercase();
    let labels: Vec<&str> = host.split('.').filter(|l| !l.is_empty()).collect();
    match labels.len() {
        0 => None,
        1 => Some(labels[0].to_string()),
        n => {
            let suffix = format!("{}.{}", labels[n - 2], labels[n - 1]);
            if n >= 3 && TWO_LEVEL_SUFFIXES.contains(&suffix.as_str()) {
                Some(labels[n - 3].to_string())
            } else {
                Some(labels[n - 2].to_string())
            }
        }
    }
}

/// Name of the pooled long-tail bucket.
pub const OTHER_DOMAIN: &str = "other";

/// Re-tags records of a crawled corpus by web domain.
///
/// Domains are ranked by record count (descending, ties by domain string);
/// the first `top_k` get their own sub-corpus `{corpus}-{domain}`, the rest are
/// pooled under `{corpus}-other`. Returned records have their `corpus_id`
/// rewritten to the sub-corpus id; the map is keyed by tag.
pub fn split_by_url_domain(records: Vec<CorpusRecord>, top_k: usize) -> Result<BTreeMap<String, Vec<CorpusRecord>>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let mut domains = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        let url = r.url.as_deref().ok_or(Error::MissingUrl { index })?;
        domains.push(url_domain(url).unwrap_or_else(|| OTHER_DOMAIN.to_string()));
    }

    // (corpus, domain) -> count, ranked within each corpus.
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (r, d) in records.iter().zip(&domains) {
        *counts.entry((r.corpus_id.as_str(), d.as_str())).or_default() += 1;
    }
    let mut per_corpus: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
    for (&(c, d), &n) in &counts {
        per_corpus.entry(c).or_default().push((d, n));
    }
    let mut kept: BTreeMap<(String, String), ()> = BTreeMap::new();
    for (c, mut ds) in per_corpus {
        ds.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (d, _) in ds.into_iter().take(top_k) {
            kept.insert((c.to_string(), d.to_string()), ());
        }
    }

    let mut out: BTreeMap<String, Vec<CorpusRecord>> = BTreeMap::new();
    for (mut r, d) in records.into_iter().zip(domains) {
        let bucket = if kept.contains_key(&(r.corpus_id.clone(), d.clone())) {
            d
        } else {
            OTHER_DOMAIN.to_string()
        };
        r.corpus_id = format!("{}-{}", r.corpus_id, bucket);
        out.entry(tag_for_corpus(&r.corpus_id)).or_default().push(r);
    }
    Ok(out)
}

/// Registers every bucket produced by [`split_by_url_domain`].
pub fn register_domain_split(registry: &mut TagRegistry, split: &BTreeMap<String, Vec<CorpusRecord>>) -> Result<()> {
    for records in split.values() {
        if let Some(r) = records.first() {
            registry.register(&r.corpus_id, TagOrigin::UrlDomain)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub per_tag_cap: usize,
    pub shuffle_seed: u64,
}

/// Per-tag accounting for a built mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub per_tag_cap: usize,
    pub seed: u64,
    /// tag -> (available, taken)
    pub counts: BTreeMap<String, (usize, usize)>,
    pub total: usize,
}

/// Caps each tag at `per_tag_cap` records (seeded sampling without
/// replacement), merges, and shuffles. The output depends only on the inputs
/// and the seed, not on map iteration or worker scheduling.
pub fn build_mixture(
    corpora: &BTreeMap<String, Vec<CorpusRecord>>,
    registry: &TagRegistry,
    spec: &MixtureSpec,
) -> Result<(Vec<CorpusRecord>, MixtureManifest)> {
    if spec.per_tag_cap == 0 {
        return Err(Error::InvalidArgument("per_tag_cap must be at least 1".into()));
    }
    let mut merged = Vec::new();
    let mut counts = BTreeMap::new();
    for (tag, records) in corpora {
        if !registry.contains_tag(tag) {
            return Err(Error::UnknownTag(tag.clone()));
        }
        for r in records {
            if registry.tag_for(&r.corpus_id)? != tag {
                return Err(Error::InvalidArgument(format!(
                    "record from `{}` filed under {tag}",
                    r.corpus_id
                )));
            }
        }
        let take = records.len().min(spec.per_tag_cap);
        if take == records.len() {
            merged.extend(records.iter().cloned());
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed ^ fnv64(tag.as_bytes()));
            let mut picked = index::sample(&mut rng, records.len(), take).into_vec();
            picked.sort_unstable();
            merged.extend(picked.into_iter().map(|i| records[i].clone()));
        }
        counts.insert(tag.clone(), (records.len(), take));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
    merged.shuffle(&mut rng);
    let manifest = MixtureManifest {
        per_tag_cap: spec.per_tag_cap,
        seed: spec.shuffle_seed,
        total: merged.len(),
        counts,
    };
    Ok((merged, manifest))
}

/// A record encoded for training: source ends in `[tag_id, EOS]`, target in `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedExample {
    pub source_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub tag_id: u32,
}

/// Encodes a record and appends its corpus tag immediately before EOS.
pub fn inject_tag(record: &CorpusRecord, registry: &TagRegistry, tokenizer: &Tokenizer) -> Result<TaggedExample> {
    let tag = registry.tag_for(&record.corpus_id)?;
    inject_explicit_tag(record, tag, tokenizer)
}

/// Like [`inject_tag`] but with a caller-chosen tag (re-tagging for OCAT and decoding).
pub fn inject_explicit_tag(record: &CorpusRecord, tag: &str, tokenizer: &Tokenizer) -> Result<TaggedExample> {
    let tag_id = tokenizer
        .vocab
        .tag_id(tag)
        .ok_or_else(|| Error::UnknownTag(tag.to_string()))?;
    let mut source_tokens = tokenizer.encode(&record.source);
    if source_tokens.is_empty() {
        return Err(Error::EmptySource);
    }
    let mut target_tokens = tokenizer.encode(&record.target);
    if target_tokens.is_empty() {
        return Err(Error::EmptyTarget);
    }
    source_tokens.extend([tag_id, EOS]);
    target_tokens.push(EOS);
    Ok(TaggedExample {
        source_tokens,
        target_tokens,
        tag_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(s: &str, c: &str) -> CorpusRecord {
        CorpusRecord::new(s, s, c)
    }

    fn with_urls(corpus: &str, counts: &[(&str, usize)]) -> Vec<CorpusRecord> {
        let mut v = Vec::new();
        for (d, n) in counts {
            for i in 0..*n {
                v.push(rec(&format!("{d} {i}"), corpus).with_url(format!("https://www.{d}.com/p/{i}")));
            }
        }
        v
    }

    #[test]
    fn parses_tsv_lines() {
        assert_eq!(
            parse_tsv_line("hello\tbonjour", "c"),
            TsvLine::Record(CorpusRecord::new("hello", "bonjour", "c"))
        );
        assert_eq!(
            parse_tsv_line("hi\tsalut\thttp://a.com/x\n", "c"),
            TsvLine::Record(CorpusRecord::new("hi", "salut", "c").with_url("http://a.com/x"))
        );
        assert_eq!(parse_tsv_line("loner", "c"), TsvLine::Malformed);
        assert_eq!(parse_tsv_line("  \t x", "c"), TsvLine::Malformed);
        assert_eq!(parse_tsv_line("", "c"), TsvLine::Blank);
    }

    #[test]
    fn domain_labels() {
        assert_eq!(url_domain("https://www.baunat.com/en/x").as_deref(), Some("baunat"));
        assert_eq!(url_domain("http://php.net").as_deref(), Some("php"));
        assert_eq!(
            url_domain("http://shop.example.co.uk:8080/a").as_deref(),
            Some("example")
        );
        assert_eq!(url_domain("ftp://user@Files.EXAMPLE.org").as_deref(), Some("example"));
        assert_eq!(url_domain("localhost/x").as_deref(), Some("localhost"));
        assert_eq!(url_domain("http:///x"), None);
    }

    #[test]
    fn registry_rules() {
        let mut reg = TagRegistry::new();
        assert_eq!(reg.register("OPUS-v1", TagOrigin::NamedCorpus).unwrap(), "<OPUS-v1>");
        assert_eq!(reg.register("OPUS-v1", TagOrigin::NamedCorpus).unwrap(), "<OPUS-v1>");
        assert!(matches!(
            reg.register("OPUS-v1", TagOrigin::Hq),
            Err(Error::DuplicateTag(_))
        ));
        assert!(reg.register("a b", TagOrigin::Synthetic).is_err());
        assert!(reg.register("<x>", TagOrigin::Synthetic).is_err());
        assert_eq!(reg.tag_for("OPUS-v1").unwrap(), "<OPUS-v1>");
        assert!(matches!(reg.tag_for("nope"), Err(Error::UnknownCorpus(_))));
        assert_eq!(reg.corpus_for("<OPUS-v1>").unwrap(), "OPUS-v1");
    }

    #[test]
    fn top_k_split() {
        let recs = with_urls("PC", &[("a", 5), ("b", 3), ("c", 1)]);
        let split = split_by_url_domain(recs, 2).unwrap();
        let sizes: Vec<(&str, usize)> = split.iter().map(|(k, v)| (k.as_str(), v.len())).collect();
        assert_eq!(sizes, vec![("<PC-a>", 5), ("<PC-b>", 3), ("<PC-other>", 1)]);
        assert!(split["<PC-a>"].iter().all(|r| r.corpus_id == "PC-a"));
    }

    #[test]
    fn top_k_tie_is_lexicographic() {
        let recs = with_urls("PC", &[("b", 2), ("a", 2)]);
        let split = split_by_url_domain(recs, 1).unwrap();
        assert_eq!(split["<PC-a>"].len(), 2);
        assert_eq!(split["<PC-other>"].len(), 2);
        assert!(!split.contains_key("<PC-b>"));
    }

    #[test]
    fn long_tail_makes_other_the_largest_bucket() {
        // Zipf-like domain sizes over 20k domains; the pooled tail dominates.
        let mut counts = Vec::new();
        let names: Vec<String> = (0..20_000).map(|i| format!("d{i}")).collect();
        for (i, n) in names.iter().enumerate() {
            counts.push((n.as_str(), (20_000 / (i + 1)).max(1)));
        }
        let recs = with_urls("ParaCrawl", &counts);
        let total = recs.len();
        let split = split_by_url_domain(recs, 1000).unwrap();
        assert_eq!(split.len(), 1001);
        assert_eq!(split.values().map(Vec::len).sum::<usize>(), total);
        let largest = split.iter().max_by_key(|(_, v)| v.len()).unwrap().0;
        assert_eq!(largest, "<ParaCrawl-other>");
    }

    #[test]
    fn split_requires_urls() {
        let recs = vec![rec("x", "PC")];
        assert_eq!(split_by_url_domain(recs, 3), Err(Error::MissingUrl { index: 0 }));
    }

    fn two_corpora() -> (BTreeMap<String, Vec<CorpusRecord>>, TagRegistry) {
        let mut reg = TagRegistry::new();
        let mut map = BTreeMap::new();
        for (name, n) in [("A", 100), ("B", 7)] {
            let tag = reg.register(name, TagOrigin::NamedCorpus).unwrap();
            map.insert(tag, (0..n).map(|i| rec(&format!("{name}{i}"), name)).collect());
        }
        (map, reg)
    }

    #[test]
    fn mixture_caps_and_is_deterministic() {
        let (map, reg) = two_corpora();
        let spec = MixtureSpec {
            per_tag_cap: 10,
            shuffle_seed: 7,
        };
        let (out, manifest) = build_mixture(&map, &reg, &spec).unwrap();
        assert_eq!(out.iter().filter(|r| r.corpus_id == "A").count(), 10);
        assert_eq!(out.iter().filter(|r| r.corpus_id == "B").count(), 7);
        assert_eq!(manifest.counts["<A>"], (100, 10));
        assert_eq!(manifest.total, 17);
        let (again, _) = build_mixture(&map, &reg, &spec).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn uncapped_mixture_is_a_permutation() {
        let (map, reg) = two_corpora();
        let (out, _) = build_mixture(
            &map,
            &reg,
            &MixtureSpec {
                per_tag_cap: 1000,
                shuffle_seed: 1,
            },
        )
        .unwrap();
        let mut got: Vec<String> = out.into_iter().map(|r| r.source).collect();
        let mut want: Vec<String> = map.values().flatten().map(|r| r.source.clone()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn mixture_rejects_unregistered_tags() {
        let (mut map, reg) = two_corpora();
        map.insert("<Z>".into(), vec![rec("z", "Z")]);
        let err = build_mixture(
            &map,
            &reg,
            &MixtureSpec {
                per_tag_cap: 5,
                shuffle_seed: 0,
            },
        )
        .unwrap_err();
        assert_eq!(err, Error::UnknownTag("<Z>".into()));
    }
}
