//! Character n-gram F-score (chrF), corpus micro-aggregation, paired
//! bootstrap resampling and score tables with significance marks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// p-value threshold for marking the top system of a column.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChrFConfig {
    pub char_order: usize,
    /// Word n-grams are not implemented; must be 0.
    pub word_order: usize,
    pub beta: f64,
    pub remove_whitespace: bool,
    pub effective_order: bool,
}

impl Default for ChrFConfig {
    fn default() -> Self {
        ChrFConfig {
            char_order: 6,
            word_order: 0,
            beta: 2.0,
            remove_whitespace: true,
            effective_order: false,
        }
    }
}

impl ChrFConfig {
    pub fn validate(&self) -> Result<()> {
        if self.char_order == 0 || self.beta.is_nan() || self.beta <= 0.0 || self.word_order != 0 {
            return Err(Error::InvalidArgument(format!("invalid chrF config {self:?}")));
        }
        Ok(())
    }

    /// Reproducibility string stored alongside every reported score.
    pub fn signature(&self) -> String {
        let beta = if self.beta == (self.beta as i64) as f64 {
            format!("{}", self.beta as i64)
        } else {
            format!("{}", self.beta)
        };
        format!(
            "chrF{beta}|nrefs:1|case:mixed|eff:{}|nc:{}|nw:{}|space:{}|tok:13a|smooth:exp|version:catlab-{}",
            if self.effective_order { "yes" } else { "no" },
            self.char_order,
            self.word_order,
            if self.remove_whitespace { "no" } else { "yes" },
            env!("CARGO_PKG_VERSION"),
        )
    }
}

/// Counts for one n-gram order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderStats {
    pub matched: u64,
    pub hyp_total: u64,
    pub ref_total: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentStats {
    /// Index `n - 1` holds order `n`.
    pub orders: Vec<OrderStats>,
}

impl SegmentStats {
    pub fn zeros(char_order: usize) -> Self {
        SegmentStats {
            orders: vec![OrderStats::default(); char_order],
        }
    }

    pub fn add(&mut self, other: &SegmentStats) {
        for (a, b) in self.orders.iter_mut().zip(&other.orders) {
            a.matched += b.matched;
            a.hyp_total += b.hyp_total;
            a.ref_total += b.ref_total;
        }
    }

    /// chrF in `[0, 100]` from summed counts.
    pub fn score(&self, config: &ChrFConfig) -> f64 {
        let (mut p, mut r, mut n) = (0.0, 0.0, 0usize);
        for o in &self.orders {
            if config.effective_order && (o.hyp_total == 0 || o.ref_total == 0) {
                continue;
            }
            if o.hyp_total > 0 {
                p += o.matched as f64 / o.hyp_total as f64;
            }
            if o.ref_total > 0 {
                r += o.matched as f64 / o.ref_total as f64;
            }
            n += 1;
        }
        if n == 0 {
            return 0.0;
        }
        100.0 * f_score(p / n as f64, r / n as f64, config.beta)
    }
}

/// `(1+β²)·P·R / (β²·P + R)`, or 0 when the denominator vanishes.
pub fn f_score(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

fn char_stream(text: &str, remove_whitespace: bool) -> Vec<char> {
    if remove_whitespace {
        text.chars().filter(|c| !c.is_whitespace()).collect()
    } else {
        text.chars().collect()
    }
}

fn ngram_counts(chars: &[char], n: usize) -> BTreeMap<&[char], u64> {
    let mut counts = BTreeMap::new();
    if chars.len() >= n {
        for g in chars.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram counts for one hypothesis/reference pair.
pub fn segment_stats(hyp: &str, reference: &str, config: &ChrFConfig) -> SegmentStats {
    let h = char_stream(hyp, config.remove_whitespace);
    let r = char_stream(reference, config.remove_whitespace);
    let mut stats = SegmentStats::zeros(config.char_order);
    for n in 1..=config.char_order {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        let matched = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        stats.orders[n - 1] = OrderStats {
            matched,
            hyp_total: h.len().saturating_sub(n - 1) as u64,
            ref_total: r.len().saturating_sub(n - 1) as u64,
        };
    }
    stats
}

/// Sentence-level chrF. Two empty strings score 100; their counts are all
/// zero, so at corpus level they have no effect.
pub fn chrf_segment(hyp: &str, reference: &str, config: &ChrFConfig) -> Result<(f64, SegmentStats)> {
    config.validate()?;
    let stats = segment_stats(hyp, reference, config);
    let empty = |s: &str| char_stream(s, config.remove_whitespace).is_empty();
    let score = if empty(hyp) && empty(reference) {
        100.0
    } else {
        stats.score(config)
    };
    Ok((score, stats))
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

pub fn corpus_stats<S: AsRef<str>, R: AsRef<str>>(
    hyps: &[S],
    refs: &[R],
    config: &ChrFConfig,
) -> Result<Vec<SegmentStats>> {
    config.validate()?;
    check_lengths(hyps.len(), refs.len())?;
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| segment_stats(h.as_ref(), r.as_ref(), config))
        .collect())
}

/// Corpus chrF: counts summed over segments per order, then scored once.
pub fn chrf_corpus<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R], config: &ChrFConfig) -> Result<f64> {
    let per = corpus_stats(hyps, refs, config)?;
    let mut total = SegmentStats::zeros(config.char_order);
    per.iter().for_each(|s| total.add(s));
    Ok(total.score(config))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// `chrF(A) − chrF(B)` on the full test set.
    pub delta: f64,
    /// Share of resamples where A does not beat B.
    pub p_value: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// One-sided paired bootstrap: is system A better than system B?
pub fn paired_bootstrap<A: AsRef<str>, B: AsRef<str>, R: AsRef<str>>(
    hyps_a: &[A],
    hyps_b: &[B],
    refs: &[R],
    config: &ChrFConfig,
    n_resamples: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    check_lengths(hyps_a.len(), hyps_b.len())?;
    let sa = corpus_stats(hyps_a, refs, config)?;
    let sb = corpus_stats(hyps_b, refs, config)?;
    bootstrap_from_stats(&sa, &sb, config, n_resamples, seed)
}

fn bootstrap_from_stats(
    sa: &[SegmentStats],
    sb: &[SegmentStats],
    config: &ChrFConfig,
    n_resamples: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if n_resamples < 100 {
        return Err(Error::InvalidArgument(format!("n_resamples {n_resamples} < 100")));
    }
    let n = sa.len();
    let sum = |s: &[SegmentStats], idx: &mut dyn Iterator<Item = usize>| {
        let mut t = SegmentStats::zeros(config.char_order);
        idx.for_each(|i| t.add(&s[i]));
        t.score(config)
    };
    let delta = sum(sa, &mut (0..n)) - sum(sb, &mut (0..n));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    let mut idx = vec![0usize; n];
    for _ in 0..n_resamples {
        idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
        let d = sum(sa, &mut idx.iter().copied()) - sum(sb, &mut idx.iter().copied());
        if d <= 0.0 {
            not_better += 1;
        }
    }
    Ok(SignificanceResult {
        delta,
        p_value: not_better as f64 / n_resamples as f64,
        n_resamples,
        seed,
    })
}

/// Whether a top-1 result with this p-value against the runner-up is marked.
pub fn is_significant(p_value: f64) -> bool {
    p_value <= SIGNIFICANCE_LEVEL
}

/// Decoded outputs of one system (a model decoded with one tag) per test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemOutputs {
    pub system: String,
    pub outputs: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub chrf: f64,
    pub bold: bool,
    /// Set on the top system of a column: p-value against the runner-up.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub system: String,
    pub cells: Vec<ScoreCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub signature: String,
    pub testsets: Vec<String>,
    pub rows: Vec<ScoreRow>,
    pub n_resamples: usize,
    pub seed: u64,
}

/// Scores every system on every test set. In each column the top system is
/// bolded when it beats the runner-up with `p ≤ 0.05`.
pub fn score_table(
    systems: &[SystemOutputs],
    references: &BTreeMap<String, Vec<String>>,
    config: &ChrFConfig,
    n_resamples: usize,
    seed: u64,
) -> Result<ScoreTable> {
    config.validate()?;
    let testsets: Vec<String> = references.keys().cloned().collect();
    let mut rows: Vec<ScoreRow> = systems
        .iter()
        .map(|s| ScoreRow {
            system: s.system.clone(),
            cells: Vec::with_capacity(testsets.len()),
        })
        .collect();
    for (col, name) in testsets.iter().enumerate() {
        let refs = &references[name];
        let mut stats = Vec::with_capacity(systems.len());
        for s in systems {
            let hyps = s
                .outputs
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("system `{}` has no outputs for `{name}`", s.system)))?;
            let per = corpus_stats(hyps, refs, config)?;
            let mut total = SegmentStats::zeros(config.char_order);
            per.iter().for_each(|x| total.add(x));
            rows[stats.len()].cells.push(ScoreCell {
                chrf: total.score(config),
                bold: false,
                p_value: None,
            });
            stats.push(per);
        }
        if systems.len() >= 2 {
            let mut order: Vec<usize> = (0..systems.len()).collect();
            order.sort_by(|&a, &b| rows[b].cells[col].chrf.total_cmp(&rows[a].cells[col].chrf));
            let (top, runner) = (order[0], order[1]);
            let sig = bootstrap_from_stats(&stats[top], &stats[runner], config, n_resamples, seed)?;
            let cell = &mut rows[top].cells[col];
            cell.p_value = Some(sig.p_value);
            cell.bold = is_significant(sig.p_value);
        }
    }
    Ok(ScoreTable {
        signature: config.signature(),
        testsets,
        rows,
        n_resamples,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent brute-force counter: every n-gram as an owned string,
    /// clipped matches found by scanning both lists.
    fn oracle(hyp: &str, reference: &str, order: usize, beta: f64) -> f64 {
        let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<Vec<char>>();
        let (h, r) = (strip(hyp), strip(reference));
        if h.is_empty() && r.is_empty() {
            return 100.0;
        }
        let grams = |v: &Vec<char>, n: usize| -> Vec<String> {
            let mut out = Vec::new();
            let mut i = 0;
            while i + n <= v.len() {
                out.push(v[i..i + n].iter().collect());
                i += 1;
            }
            out
        };
        let (mut ps, mut rs) = (0.0, 0.0);
        for n in 1..=order {
            let hg = grams(&h, n);
            let mut rg = grams(&r, n);
            let mut m = 0.0;
            for g in &hg {
                if let Some(pos) = rg.iter().position(|x| x == g) {
                    rg.remove(pos);
                    m += 1.0;
                }
            }
            let rtotal = grams(&r, n).len();
            if !hg.is_empty() {
                ps += m / hg.len() as f64;
            }
            if rtotal > 0 {
                rs += m / rtotal as f64;
            }
        }
        let (p, rr) = (ps / order as f64, rs / order as f64);
        let b2 = beta * beta;
        if b2 * p + rr == 0.0 {
            0.0
        } else {
            100.0 * (1.0 + b2) * p * rr / (b2 * p + rr)
        }
    }

    fn random_text(rng: &mut ChaCha8Rng) -> String {
        let alphabet = ['a', 'b', 'c', 'd', ' ', 'é', 'x'];
        let len = rng.gen_range(0..25);
        (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let cfg = ChrFConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let (h, r) = (random_text(&mut rng), random_text(&mut rng));
            let (s, _) = chrf_segment(&h, &r, &cfg).unwrap();
            let o = oracle(&h, &r, 6, 2.0);
            assert!((s - o).abs() < 1e-9, "{h:?} {r:?}: {s} vs {o}");
        }
    }

    #[test]
    fn hand_cases() {
        let cfg2 = ChrFConfig {
            char_order: 2,
            ..ChrFConfig::default()
        };
        let (s, st) = chrf_segment("abc", "ab", &cfg2).unwrap();
        assert!((s - 87.5).abs() < 1e-12);
        assert_eq!(
            st.orders,
            vec![
                OrderStats {
                    matched: 2,
                    hyp_total: 3,
                    ref_total: 2
                },
                OrderStats {
                    matched: 1,
                    hyp_total: 2,
                    ref_total: 1
                }
            ]
        );
        let cfg = ChrFConfig::default();
        assert_eq!(chrf_segment("the cat", "the cat", &cfg).unwrap().0, 100.0);
        assert_eq!(chrf_segment("abc", "xyz", &cfg).unwrap().0, 0.0);
        assert_eq!(chrf_segment("", "", &cfg).unwrap().0, 100.0);
        assert_eq!(chrf_segment("", "abc", &cfg).unwrap().0, 0.0);
        assert_eq!(chrf_segment("a b c d e f", "abcdef", &cfg).unwrap().0, 100.0);
        // Orders longer than the string count as zero precision and recall.
        let short = chrf_segment("ab", "ab", &cfg).unwrap().0;
        assert!((short - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_aggregation() {
        let cfg2 = ChrFConfig {
            char_order: 2,
            ..ChrFConfig::default()
        };
        // Order 1: matched 2+1, hyp 3+1, ref 2+2. Order 2: matched 1+0, hyp 2+0, ref 1+1.
        // P = (3/4 + 1/2)/2 = 5/8, R = (3/4 + 1/2)/2 = 5/8, F = 5/8.
        let s = chrf_corpus(&["abc", "x"], &["ab", "xy"], &cfg2).unwrap();
        assert!((s - 62.5).abs() < 1e-12);

        let cfg = ChrFConfig::default();
        let single = chrf_corpus(&["kitten sat"], &["sitting cat"], &cfg).unwrap();
        assert_eq!(single, chrf_segment("kitten sat", "sitting cat", &cfg).unwrap().0);

        let hyps = ["a cat", "the dog barks", "zzz"];
        let refs = ["the cat", "a dog barked", "zz"];
        let doubled_h: Vec<&str> = hyps.iter().chain(hyps.iter()).copied().collect();
        let doubled_r: Vec<&str> = refs.iter().chain(refs.iter()).copied().collect();
        let a = chrf_corpus(&hyps, &refs, &cfg).unwrap();
        let b = chrf_corpus(&doubled_h, &doubled_r, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);

        assert!(matches!(
            chrf_corpus(&["a"], &["a", "b"], &cfg),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bootstrap_fixtures() {
        let cfg = ChrFConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let refs: Vec<String> = (0..50).map(|_| random_text(&mut rng) + "q").collect();
        let same = paired_bootstrap(&refs, &refs, &refs, &cfg, 1000, 1).unwrap();
        assert_eq!(same.delta, 0.0);
        assert_eq!(same.p_value, 1.0);

        let empty = vec![String::new(); 50];
        let dom = paired_bootstrap(&refs, &empty, &refs, &cfg, 1000, 1).unwrap();
        assert!(dom.p_value < 0.01);
        assert!(dom.delta > 99.0);
        let again = paired_bootstrap(&refs, &empty, &refs, &cfg, 1000, 1).unwrap();
        assert_eq!(dom, again);
        assert!(paired_bootstrap(&refs, &empty, &refs, &cfg, 99, 1).is_err());
    }

    #[test]
    fn bold_threshold() {
        assert!(is_significant(0.04));
        assert!(is_significant(0.05));
        assert!(!is_significant(0.06));
    }

    #[test]
    fn table_shape_and_bolding() {
        let cfg = ChrFConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let refs: Vec<String> = (0..40).map(|_| random_text(&mut rng) + "zz").collect();
        let noisy: Vec<String> = refs.iter().map(|r| r.chars().rev().collect()).collect();
        let mut references = BTreeMap::new();
        references.insert("test".to_string(), refs.clone());
        let sys = |name: &str, out: &Vec<String>| SystemOutputs {
            system: name.into(),
            outputs: [("test".to_string(), out.clone())].into_iter().collect(),
        };
        let t = score_table(&[sys("good", &refs), sys("bad", &noisy)], &references, &cfg, 200, 4).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows[0].cells[0].bold);
        assert!(!t.rows[1].cells[0].bold);
        assert_eq!(t.rows[1].cells[0].p_value, None);

        let tie = score_table(&[sys("a", &refs), sys("b", &refs)], &references, &cfg, 200, 4).unwrap();
        assert!(!tie.rows.iter().any(|r| r.cells[0].bold));
        assert!(t
            .signature
            .starts_with("chrF2|nrefs:1|case:mixed|eff:no|nc:6|nw:0|space:no|tok:13a"));
    }

    proptest! {
        #[test]
        fn beta_reciprocity(p in 0.0f64..1.0, r in 0.0f64..1.0, beta in 0.1f64..5.0) {
            let a = f_score(p, r, beta);
            let b = f_score(r, p, 1.0 / beta);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn symmetric_at_beta_one(h in "[a-e ]{0,20}", r in "[a-e ]{0,20}") {
            let cfg = ChrFConfig { beta: 1.0, ..ChrFConfig::default() };
            let a = chrf_segment(&h, &r, &cfg).unwrap().0;
            let b = chrf_segment(&r, &h, &cfg).unwrap().0;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn extra_match_never_hurts(
            orders in proptest::collection::vec((0u64..20, 1u64..20, 1u64..20), 6),
            which in 0usize..6,
        ) {
            let cfg = ChrFConfig::default();
            let mut stats = SegmentStats { orders: orders.iter().map(|&(m, h, r)| OrderStats {
                matched: m.min(h).min(r), hyp_total: h, ref_total: r }).collect() };
            let before = stats.score(&cfg);
            let o = &mut stats.orders[which];
            if o.matched < o.hyp_total.min(o.ref_total) {
                o.matched += 1;
            }
            prop_assert!(stats.score(&cfg) >= before - 1e-12);
        }

        #[test]
        fn score_in_range(h in "\\PC{0,30}", r in "\\PC{0,30}") {
            let s = chrf_segment(&h, &r, &ChrFConfig::default()).unwrap().0;
            prop_assert!((0.0..=100.0).contains(&s));
        }
    }
}
