//! Greedy and beam-search decoding with an inference tag appended to the source.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::{DecoderState, EncodedSource, Parameters, Scalar};
use crate::tokenizer::{Tokenizer, Vocabulary, BOS, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub inference_tag: String,
    pub beam_size: usize,
    /// Output budget is `ceil(max_len_ratio × source_len) + max_len_offset`
    /// tokens including EOS, capped by the model's `max_len`.
    pub max_len_ratio: f64,
    pub max_len_offset: usize,
    /// Exponent on the hypothesis length when normalizing scores (0 = raw log-probability).
    pub length_penalty: f64,
    pub forbid_tags_in_output: bool,
}

impl DecodeConfig {
    pub fn new(inference_tag: impl Into<String>) -> Self {
        DecodeConfig {
            inference_tag: inference_tag.into(),
            beam_size: 4,
            max_len_ratio: 1.5,
            max_len_offset: 5,
            length_penalty: 1.0,
            forbid_tags_in_output: true,
        }
    }

    pub fn with_beam(mut self, beam_size: usize) -> Self {
        self.beam_size = beam_size;
        self
    }

    fn output_budget(&self, src_len: usize, model_max: usize) -> usize {
        let scaled = num_traits::Float::ceil(self.max_len_ratio * src_len as f64) as usize;
        (scaled + self.max_len_offset).clamp(1, model_max)
    }
}

/// A finished hypothesis. `tokens` excludes the final EOS; `length` counts it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
    pub length: usize,
}

/// Anything that yields next-token logits for a growing prefix.
pub trait StepScorer {
    type State: Clone;
    fn initial(&self) -> Self::State;
    /// Feeds `token` and returns unnormalized scores for the next token.
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
    fn vocab_size(&self) -> usize;
}

/// The transformer decoder over one encoded source.
pub struct ModelScorer<'a, F> {
    params: &'a Parameters<F>,
    enc: EncodedSource<F>,
}

impl<'a, F: Scalar> ModelScorer<'a, F> {
    pub fn new(params: &'a Parameters<F>, source_ids: &[u32]) -> Result<Self> {
        Ok(ModelScorer {
            params,
            enc: params.encode_source(source_ids)?,
        })
    }
}

impl<F: Scalar> StepScorer for ModelScorer<'_, F> {
    type State = DecoderState<F>;

    fn initial(&self) -> Self::State {
        self.params.start_decoder()
    }

    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>> {
        Ok(self
            .params
            .decoder_step(&self.enc, state, token)?
            .into_iter()
            .map(|x| x.as_f64())
            .collect())
    }

    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }
}

/// Search limits shared by greedy and beam search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchParams {
    pub beam_size: usize,
    /// Maximum tokens including EOS; EOS is forced at the last position.
    pub max_len: usize,
    pub length_penalty: f64,
    /// `forbidden[id]` removes `id` from the output distribution.
    pub forbidden: Vec<bool>,
}

/// Log-probabilities after removing forbidden tokens (and everything except
/// EOS when `eos_only`).
fn masked_log_probs(logits: &[f64], forbidden: &[bool], eos_only: bool) -> Vec<f64> {
    let allowed = |i: usize| {
        if eos_only {
            i == EOS as usize
        } else {
            !forbidden.get(i).copied().unwrap_or(false)
        }
    };
    let max = (0..logits.len())
        .filter(|&i| allowed(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..logits.len())
        .filter(|&i| allowed(i))
        .map(|i| num_traits::Float::exp(logits[i] - max))
        .sum();
    let lse = max + num_traits::Float::ln(sum);
    (0..logits.len())
        .map(|i| if allowed(i) { logits[i] - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn normalized(logprob: f64, length: usize, penalty: f64) -> f64 {
    if penalty == 0.0 {
        logprob
    } else {
        logprob / num_traits::Float::powf(length as f64, penalty)
    }
}

struct Live<S> {
    tokens: Vec<u32>,
    logprob: f64,
    state: S,
    log_probs: Vec<f64>,
}

fn check_search(search: &SearchParams, vocab: usize) -> Result<()> {
    if search.beam_size == 0 || search.max_len == 0 {
        return Err(Error::InvalidArgument(
            "beam_size and max_len must be at least 1".into(),
        ));
    }
    if search.forbidden.get(EOS as usize).copied().unwrap_or(false) || vocab <= EOS as usize {
        return Err(Error::InvalidArgument("EOS must be an allowed output".into()));
    }
    Ok(())
}

/// Beam search. Each step expands every live hypothesis by every allowed
/// token, keeps the `beam_size` best by log-probability (ties: lower prefix,
/// then lower token id), moves those ending in EOS to the finished pool and
/// stops when the pool holds `beam_size` entries or nothing is live.
pub fn beam_search_with<S: StepScorer>(scorer: &S, search: &SearchParams) -> Result<Hypothesis> {
    check_search(search, scorer.vocab_size())?;
    let k = search.beam_size;
    let mut state = scorer.initial();
    let first = scorer.advance(&mut state, BOS)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        logprob: 0.0,
        log_probs: masked_log_probs(&first, &search.forbidden, search.max_len == 1),
        state,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && finished.len() < k {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, h) in live.iter().enumerate() {
            for (t, &lp) in h.log_probs.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    cands.push((h.logprob + lp, bi, t as u32));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(k - finished.len());
        let mut next = Vec::with_capacity(cands.len());
        for (logprob, bi, t) in cands {
            let parent = &live[bi];
            if t == EOS {
                let length = parent.tokens.len() + 1;
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    logprob,
                    score: normalized(logprob, length, search.length_penalty),
                    length,
                });
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(t);
            let mut state = parent.state.clone();
            let logits = scorer.advance(&mut state, t)?;
            let eos_only = tokens.len() + 1 >= search.max_len;
            next.push(Live {
                log_probs: masked_log_probs(&logits, &search.forbidden, eos_only),
                tokens,
                logprob,
                state,
            });
        }
        live = next;
    }
    finished
        .into_iter()
        .min_by(compare_finished)
        .ok_or_else(|| Error::InvalidArgument("search produced no hypothesis".into()))
}

/// Best first: higher score, then shorter (earlier finish), then lexicographic ids.
fn compare_finished(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.length.cmp(&b.length))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Argmax rollout (ties to the lower id) until EOS or the length budget.
pub fn greedy_with<S: StepScorer>(scorer: &S, search: &SearchParams) -> Result<Hypothesis> {
    check_search(search, scorer.vocab_size())?;
    let mut state = scorer.initial();
    let mut logits = scorer.advance(&mut state, BOS)?;
    let (mut tokens, mut logprob) = (Vec::new(), 0.0);
    loop {
        let eos_only = tokens.len() + 1 >= search.max_len;
        let lp = masked_log_probs(&logits, &search.forbidden, eos_only);
        let mut best = 0;
        for i in 1..lp.len() {
            if lp[i] > lp[best] {
                best = i;
            }
        }
        logprob += lp[best];
        if best as u32 == EOS {
            let length = tokens.len() + 1;
            return Ok(Hypothesis {
                tokens,
                logprob,
                score: normalized(logprob, length, search.length_penalty),
                length,
            });
        }
        tokens.push(best as u32);
        logits = scorer.advance(&mut state, best as u32)?;
    }
}

/// Tokens that may never be generated: PAD, BOS, UNK and, when requested, every tag.
pub fn forbidden_mask(vocab: &Vocabulary, forbid_tags: bool) -> Vec<bool> {
    (0..vocab.size() as u32)
        .map(|id| id != EOS && (vocab.is_special(id) || (forbid_tags && vocab.is_tag(id))))
        .collect()
}

fn search_params<F>(params: &Parameters<F>, src_len: usize, config: &DecodeConfig, vocab: &Vocabulary) -> SearchParams {
    SearchParams {
        beam_size: config.beam_size,
        max_len: config.output_budget(src_len, params.config.max_len),
        length_penalty: config.length_penalty,
        forbidden: forbidden_mask(vocab, config.forbid_tags_in_output),
    }
}

/// Beam search over a source that already carries its tag and EOS.
pub fn beam_search<F: Scalar>(
    params: &Parameters<F>,
    source_ids: &[u32],
    config: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Hypothesis> {
    let scorer = ModelScorer::new(params, source_ids)?;
    beam_search_with(&scorer, &search_params(params, source_ids.len(), config, vocab))
}

pub fn greedy<F: Scalar>(
    params: &Parameters<F>,
    source_ids: &[u32],
    config: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Hypothesis> {
    let scorer = ModelScorer::new(params, source_ids)?;
    greedy_with(&scorer, &search_params(params, source_ids.len(), config, vocab))
}

/// Encodes `text`, appends the tag and EOS.
pub fn tagged_source(text: &str, tag_id: u32, tokenizer: &Tokenizer) -> Vec<u32> {
    let mut ids = tokenizer.encode(text);
    ids.extend([tag_id, EOS]);
    ids
}

/// Translates every source with the configured inference tag, in input order.
pub fn decode_corpus<F: Scalar, S: AsRef<str>>(
    params: &Parameters<F>,
    sources: &[S],
    config: &DecodeConfig,
    tokenizer: &Tokenizer,
) -> Result<Vec<String>> {
    let tag_id = tokenizer
        .vocab
        .tag_id(&config.inference_tag)
        .ok_or_else(|| Error::UnknownTag(config.inference_tag.clone()))?;
    decode_with(params, sources, Some(tag_id), config, tokenizer)
}

/// Translates without any tag, for models trained without corpus tags.
/// `config.inference_tag` is ignored.
pub fn decode_untagged<F: Scalar, S: AsRef<str>>(
    params: &Parameters<F>,
    sources: &[S],
    config: &DecodeConfig,
    tokenizer: &Tokenizer,
) -> Result<Vec<String>> {
    decode_with(params, sources, None, config, tokenizer)
}

fn decode_with<F: Scalar, S: AsRef<str>>(
    params: &Parameters<F>,
    sources: &[S],
    tag_id: Option<u32>,
    config: &DecodeConfig,
    tokenizer: &Tokenizer,
) -> Result<Vec<String>> {
    if tokenizer.vocab.size() != params.config.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary has {} units, model expects {}",
            tokenizer.vocab.size(),
            params.config.vocab_size
        )));
    }
    sources
        .iter()
        .map(|s| {
            let mut ids = tokenizer.encode(s.as_ref());
            ids.extend(tag_id);
            ids.push(EOS);
            let hyp = beam_search(params, &ids, config, &tokenizer.vocab)?;
            Ok(tokenizer.decode(&hyp.tokens))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::fnv64;
    use crate::model::{init_params, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Prefix-dependent toy distribution over `vocab` tokens, id 2 = EOS.
    struct Toy {
        vocab: usize,
        seed: u64,
    }

    impl Toy {
        fn logits(&self, prefix: &[u32]) -> Vec<f64> {
            let mut bytes: Vec<u8> = self.seed.to_le_bytes().to_vec();
            prefix.iter().for_each(|t| bytes.extend(t.to_le_bytes()));
            let mut rng = ChaCha8Rng::seed_from_u64(fnv64(&bytes));
            (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect()
        }
    }

    impl StepScorer for Toy {
        type State = Vec<u32>;
        fn initial(&self) -> Vec<u32> {
            Vec::new()
        }
        fn advance(&self, state: &mut Vec<u32>, token: u32) -> Result<Vec<f64>> {
            state.push(token);
            Ok(self.logits(state))
        }
        fn vocab_size(&self) -> usize {
            self.vocab
        }
    }

    /// Scores every EOS-terminated sequence of at most `max_len` tokens.
    fn enumerate(toy: &Toy, search: &SearchParams) -> Hypothesis {
        let mut best: Option<Hypothesis> = None;
        let mut stack = vec![(vec![BOS], 0.0f64)];
        while let Some((prefix, lp)) = stack.pop() {
            let out_len = prefix.len() - 1;
            let eos_only = out_len + 1 >= search.max_len;
            let probs = masked_log_probs(&toy.logits(&prefix), &search.forbidden, eos_only);
            for (t, &p) in probs.iter().enumerate() {
                if p == f64::NEG_INFINITY {
                    continue;
                }
                if t as u32 == EOS {
                    let h = Hypothesis {
                        tokens: prefix[1..].to_vec(),
                        logprob: lp + p,
                        score: normalized(lp + p, out_len + 1, search.length_penalty),
                        length: out_len + 1,
                    };
                    if best.as_ref().is_none_or(|b| compare_finished(&h, b) == Ordering::Less) {
                        best = Some(h);
                    }
                } else {
                    let mut next = prefix.clone();
                    next.push(t as u32);
                    stack.push((next, lp + p));
                }
            }
        }
        best.unwrap()
    }

    fn toy_search(vocab: usize, beam: usize, max_len: usize, lp: f64) -> SearchParams {
        let mut forbidden = vec![false; vocab];
        forbidden[0] = true;
        forbidden[1] = true;
        SearchParams {
            beam_size: beam,
            max_len,
            length_penalty: lp,
            forbidden,
        }
    }

    #[test]
    fn exhaustive_oracle_agrees() {
        // Vocabulary {PAD, BOS, EOS, a, b}: three generable tokens, sequences up to 3.
        for seed in 0..40 {
            let toy = Toy { vocab: 5, seed };
            for lp in [0.0, 1.0] {
                let search = toy_search(5, 9, 3, lp);
                let got = beam_search_with(&toy, &search).unwrap();
                let want = enumerate(&toy, &search);
                assert_eq!(got.tokens, want.tokens, "seed {seed} lp {lp}");
                assert!((got.score - want.score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wider_beam_never_beats_exhaustive() {
        for seed in 0..40 {
            let toy = Toy { vocab: 6, seed };
            let best = enumerate(&toy, &toy_search(6, 1, 4, 0.0));
            for beam in 1..=4 {
                let got = beam_search_with(&toy, &toy_search(6, beam, 4, 0.0)).unwrap();
                assert!(got.score <= best.score + 1e-12);
            }
            let wide = beam_search_with(&toy, &toy_search(6, 64, 4, 0.0)).unwrap();
            assert_eq!(wide.tokens, best.tokens);
        }
    }

    #[test]
    fn beam_one_is_greedy_on_toys() {
        for seed in 0..100 {
            let toy = Toy { vocab: 7, seed };
            let s = toy_search(7, 1, 8, 1.0);
            assert_eq!(beam_search_with(&toy, &s).unwrap(), greedy_with(&toy, &s).unwrap());
        }
    }

    #[test]
    fn length_budget_forces_eos() {
        let toy = Toy { vocab: 6, seed: 1 };
        let h = beam_search_with(&toy, &toy_search(6, 3, 1, 1.0)).unwrap();
        assert!(h.tokens.is_empty());
        assert_eq!(h.length, 1);
    }

    #[test]
    fn model_decoding_respects_mask_and_is_deterministic() {
        let tok = crate::tokenizer::train_subword(&["a b c d e f g"], 40, &["<x>".into(), "<y>".into()]).unwrap();
        let cfg = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            d_ffn: 16,
            n_heads: 2,
            head_dim: 8,
            ..ModelConfig::desk(tok.vocab.size())
        };
        let p = init_params::<f32>(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dc = DecodeConfig::new("<x>");
        let mask = forbidden_mask(&tok.vocab, true);
        for _ in 0..20 {
            let len = rng.gen_range(1..6);
            let mut src: Vec<u32> = (0..len).map(|_| rng.gen_range(6..tok.vocab.size() as u32)).collect();
            src.extend([4, EOS]);
            let a = beam_search(&p, &src, &dc, &tok.vocab).unwrap();
            assert_eq!(a, beam_search(&p, &src, &dc, &tok.vocab).unwrap());
            assert!(a.tokens.iter().all(|&t| !mask[t as usize] && t != EOS));
            assert!(a.length <= dc.output_budget(src.len(), cfg.max_len));
            let b1 = dc.clone().with_beam(1);
            assert_eq!(
                beam_search(&p, &src, &b1, &tok.vocab).unwrap(),
                greedy(&p, &src, &b1, &tok.vocab).unwrap()
            );
        }
        let empty: [&str; 0] = [];
        assert!(decode_corpus(&p, &empty, &dc, &tok).unwrap().is_empty());
        assert_eq!(
            decode_corpus(&p, &["a b"], &DecodeConfig::new("<z>"), &tok).unwrap_err(),
            Error::UnknownTag("<z>".into())
        );
        assert_eq!(decode_corpus(&p, &["a b", "c"], &dc, &tok).unwrap().len(), 2);
    }
}
