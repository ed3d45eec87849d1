//! Adam with linear warmup and inverse-square-root decay, coordinate-level
//! freeze masks, token-budget batching and checkpoint averaging.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hash::Fnv64;
use crate::model::{loss_and_grad, Batch, GradOptions, Gradients, Mode, Parameters, Scalar, SeqPair};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub warmup_steps: usize,
}

impl Schedule {
    /// A flat schedule (warmup of one step), used for fine-tuning.
    pub fn constant(lr: f64) -> Self {
        Schedule {
            lr_max: lr,
            warmup_steps: 1,
        }
    }
}

/// Learning rate at a 1-based step.
pub fn lr_at(schedule: &Schedule, step: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArgument("lr_at: steps are 1-based".into()));
    }
    if schedule.lr_max.is_nan() || schedule.lr_max <= 0.0 || schedule.warmup_steps == 0 {
        return Err(Error::InvalidArgument(
            "lr_at: lr_max and warmup_steps must be positive".into(),
        ));
    }
    let (s, w) = (step as f64, schedule.warmup_steps as f64);
    Ok(if step <= schedule.warmup_steps {
        schedule.lr_max * s / w
    } else {
        schedule.lr_max * num_traits::Float::sqrt(w / s)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moments aligned with the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: usize,
    pub adam: AdamConfig,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &Parameters<F>, adam: AdamConfig) -> Self {
        let zeros: Vec<Vec<F>> = params.tensors.iter().map(|t| vec![F::zero(); t.data.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            adam,
        }
    }
}

/// A trainable slice of one named tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub tensor: String,
    /// Flat coordinate ranges; `None` means the whole tensor.
    pub ranges: Option<Vec<Range<usize>>>,
}

/// Which coordinates an optimizer step may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeMask {
    All,
    Only(Vec<MaskRegion>),
}

impl FreezeMask {
    /// Exactly one row of the shared embedding matrix.
    pub fn embedding_row(d_model: usize, id: u32) -> Self {
        let start = id as usize * d_model;
        FreezeMask::Only(vec![MaskRegion {
            tensor: "embed.weight".into(),
            ranges: Some(core::iter::once(start..start + d_model).collect()),
        }])
    }

    /// Whole tensors whose names satisfy `keep`.
    pub fn tensors_where<F>(params: &Parameters<F>, keep: impl Fn(&str) -> bool) -> Self {
        FreezeMask::Only(
            params
                .tensors
                .iter()
                .filter(|t| keep(&t.name))
                .map(|t| MaskRegion {
                    tensor: t.name.clone(),
                    ranges: None,
                })
                .collect(),
        )
    }

    /// Resolves names to per-tensor coordinate ranges (sorted, merged).
    pub fn resolve<F>(&self, params: &Parameters<F>) -> Result<Vec<Vec<Range<usize>>>> {
        let mut out: Vec<Vec<Range<usize>>> = vec![Vec::new(); params.tensors.len()];
        match self {
            FreezeMask::All => {
                for (o, t) in out.iter_mut().zip(&params.tensors) {
                    o.push(0..t.data.len());
                }
            }
            FreezeMask::Only(regions) => {
                for r in regions {
                    let idx = params
                        .tensors
                        .iter()
                        .position(|t| t.name == r.tensor)
                        .ok_or_else(|| Error::ShapeMismatch(format!("mask names unknown tensor `{}`", r.tensor)))?;
                    let len = params.tensors[idx].data.len();
                    match &r.ranges {
                        None => out[idx].push(0..len),
                        Some(rs) => {
                            for rg in rs {
                                if rg.start > rg.end || rg.end > len {
                                    return Err(Error::ShapeMismatch(format!(
                                        "mask range {rg:?} outside `{}` ({len})",
                                        r.tensor
                                    )));
                                }
                                out[idx].push(rg.clone());
                            }
                        }
                    }
                }
                for rs in &mut out {
                    rs.sort_by_key(|r| (r.start, r.end));
                    let mut merged: Vec<Range<usize>> = Vec::with_capacity(rs.len());
                    for r in rs.drain(..) {
                        match merged.last_mut() {
                            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
                            _ if r.is_empty() => {}
                            _ => merged.push(r),
                        }
                    }
                    *rs = merged;
                }
            }
        }
        Ok(out)
    }

    /// Number of unmasked scalar coordinates.
    pub fn trainable_count<F>(&self, params: &Parameters<F>) -> Result<usize> {
        Ok(self.resolve(params)?.iter().flatten().map(|r| r.len()).sum())
    }

    /// Per-tensor flags for [`GradOptions::trainable`].
    pub fn tensor_flags<F>(&self, params: &Parameters<F>) -> Result<Vec<bool>> {
        Ok(self.resolve(params)?.iter().map(|r| !r.is_empty()).collect())
    }
}

/// One Adam update with bias correction. Masked coordinates of the
/// parameters and of both moments are left untouched, so they stay
/// bit-identical no matter what the gradient holds.
pub fn adam_step<F: Scalar>(
    params: &mut Parameters<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
    mask: &FreezeMask,
    lr: f64,
) -> Result<()> {
    let regions = mask.resolve(params)?;
    adam_step_resolved(params, grads, state, &regions, lr)
}

fn adam_step_resolved<F: Scalar>(
    params: &mut Parameters<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
    regions: &[Vec<Range<usize>>],
    lr: f64,
) -> Result<()> {
    let n = params.tensors.len();
    if grads.tensors.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(
            "gradient or optimizer state does not mirror parameters".into(),
        ));
    }
    for i in 0..n {
        let len = params.tensors[i].data.len();
        if grads.tensors[i].len() != len || state.m[i].len() != len || state.v[i].len() != len {
            return Err(Error::ShapeMismatch(format!("tensor `{}`", params.tensors[i].name)));
        }
    }
    state.step += 1;
    let a = state.adam;
    let t = state.step as i32;
    let bc1 = 1.0 - num_traits::Float::powi(a.beta1, t);
    let bc2 = 1.0 - num_traits::Float::powi(a.beta2, t);
    let (b1, b2) = (F::of(a.beta1), F::of(a.beta2));
    let (c1, c2) = (F::of(1.0 - a.beta1), F::of(1.0 - a.beta2));
    let step_size = F::of(lr / bc1);
    let inv_bc2 = F::of(1.0 / bc2);
    let eps = F::of(a.eps);
    for (i, rs) in regions.iter().enumerate() {
        let p = &mut params.tensors[i].data;
        let g = &grads.tensors[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for r in rs {
            for j in r.clone() {
                let gj = g[j];
                m[j] = b1 * m[j] + c1 * gj;
                v[j] = b2 * v[j] + c2 * gj * gj;
                p[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub steps: usize,
    /// Token budget per batch, counted as `examples × (longest source + longest target)`.
    pub max_tokens: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Only the most recent this-many checkpoints are kept in memory.
    pub keep_checkpoints: usize,
    pub log_every: usize,
    /// Global gradient-norm clip over trainable coordinates; off by default.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(schedule: Schedule, steps: usize, max_tokens: usize, seed: u64) -> Self {
        TrainConfig {
            schedule,
            steps,
            max_tokens,
            seed,
            checkpoint_every: 0,
            keep_checkpoints: 5,
            log_every: 100,
            clip_norm: None,
            adam: AdamConfig::default(),
        }
    }
}

/// Parameters at a given step plus a hash of the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub params: Parameters<F>,
    pub step: usize,
    pub config_hash: u64,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(params: Parameters<F>, step: usize) -> Self {
        let config_hash = config_hash(&params);
        Checkpoint {
            params,
            step,
            config_hash,
        }
    }
}

/// Architecture hash including any adapter or LoRA extensions.
pub fn config_hash<F>(params: &Parameters<F>) -> u64 {
    let mut h = Fnv64::default();
    h.write_u64(params.config.arch_hash());
    if let Some(a) = params.ext.adapter {
        h.write_str("adapter");
        h.write_u64(a.bottleneck_dim as u64);
    }
    if let Some(l) = params.ext.lora {
        h.write_str("lora");
        h.write_u64(l.rank as u64);
        h.write_u64(l.alpha.to_bits());
    }
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous entry.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub params: Parameters<F>,
    pub checkpoints: Vec<Checkpoint<F>>,
    pub log: Vec<LogEntry>,
}

/// Infinite deterministic batch stream. Each epoch shuffles the examples,
/// sorts windows of them by length so batches hold similar lengths, packs
/// greedily under the token budget and shuffles the batch order.
pub struct BatchStream<'a> {
    data: &'a [SeqPair],
    max_tokens: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a [SeqPair], max_tokens: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be positive".into()));
        }
        Ok(BatchStream {
            data,
            max_tokens,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
        })
    }

    fn refill(&mut self) {
        const WINDOW: usize = 256;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        let len_of = |i: usize| (self.data[i].source.len(), self.data[i].target.len() + 1);
        let mut batches = Vec::new();
        for window in order.chunks_mut(WINDOW) {
            window.sort_by_key(|&i| {
                let (s, t) = len_of(i);
                s + t
            });
            let mut cur: Vec<usize> = Vec::new();
            let (mut ms, mut mt) = (0, 0);
            for &i in window.iter() {
                let (s, t) = len_of(i);
                let (ns, nt) = (ms.max(s), mt.max(t));
                if !cur.is_empty() && (cur.len() + 1) * (ns + nt) > self.max_tokens {
                    batches.push(core::mem::take(&mut cur));
                    (ms, mt) = (s, t);
                } else {
                    (ms, mt) = (ns, nt);
                }
                cur.push(i);
            }
            if !cur.is_empty() {
                batches.push(cur);
            }
        }
        batches.shuffle(&mut self.rng);
        batches.reverse();
        self.queue = batches;
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            self.refill();
        }
        let idx = self.queue.pop().expect("refill yields at least one batch");
        let pairs: Vec<SeqPair> = idx.iter().map(|&i| self.data[i].clone()).collect();
        Batch::from_pairs(&pairs)
    }
}

/// Runs `config.steps` optimizer steps over `data`, updating only the
/// coordinates `mask` allows. Optimizer state starts fresh.
pub fn train_loop<F: Scalar>(
    params: Parameters<F>,
    data: &[SeqPair],
    config: &TrainConfig,
    mask: &FreezeMask,
) -> Result<TrainOutcome<F>> {
    train_loop_observed(params, data, config, mask, &mut |_, _| Ok(()))
}

/// Like [`train_loop`], calling `observer(step, params)` after every update.
pub fn train_loop_observed<F: Scalar>(
    params: Parameters<F>,
    data: &[SeqPair],
    config: &TrainConfig,
    mask: &FreezeMask,
    observer: &mut dyn FnMut(usize, &Parameters<F>) -> Result<()>,
) -> Result<TrainOutcome<F>> {
    let mut params = params;
    let mut outcome_log = Vec::new();
    let mut checkpoints: Vec<Checkpoint<F>> = Vec::new();
    if config.steps == 0 {
        return Ok(TrainOutcome {
            params,
            checkpoints,
            log: outcome_log,
        });
    }
    let regions = mask.resolve(&params)?;
    let flags: Vec<bool> = regions.iter().map(|r| !r.is_empty()).collect();
    let mut state = OptimizerState::new(&params, config.adam);
    let mut stream = BatchStream::new(data, config.max_tokens, config.seed)?;
    let dropout = params.config.dropout > 0.0;
    let (mut acc, mut acc_n) = (0.0f64, 0usize);
    for step in 1..=config.steps {
        let batch = stream.next_batch()?;
        let mode = if dropout {
            Mode::Train {
                seed: config.seed ^ (step as u64).wrapping_mul(0xA24B_AED4_963E_E407),
            }
        } else {
            Mode::Eval
        };
        let (loss, mut grads) = loss_and_grad(
            &params,
            &batch,
            GradOptions {
                mode,
                loss_scale: 1.0,
                trainable: Some(&flags),
            },
        )?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        if let Some(max_norm) = config.clip_norm {
            clip_gradients(&mut grads, &regions, max_norm);
        }
        let lr = lr_at(&config.schedule, step)?;
        adam_step_resolved(&mut params, &grads, &mut state, &regions, lr)?;
        observer(step, &params)?;
        acc += loss;
        acc_n += 1;
        if config.log_every > 0 && (step % config.log_every == 0 || step == config.steps) {
            outcome_log.push(LogEntry {
                step,
                lr,
                loss: acc / acc_n as f64,
            });
            (acc, acc_n) = (0.0, 0);
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            checkpoints.push(Checkpoint::new(params.clone(), step));
            if checkpoints.len() > config.keep_checkpoints.max(1) {
                checkpoints.remove(0);
            }
        }
    }
    Ok(TrainOutcome {
        params,
        checkpoints,
        log: outcome_log,
    })
}

fn clip_gradients<F: Scalar>(grads: &mut Gradients<F>, regions: &[Vec<Range<usize>>], max_norm: f64) {
    let mut sq = 0.0f64;
    for (g, rs) in grads.tensors.iter().zip(regions) {
        for r in rs {
            sq += g[r.clone()].iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
    }
    let norm = num_traits::Float::sqrt(sq);
    if norm > max_norm {
        grads.scale(F::of(max_norm / norm));
    }
}

/// Elementwise mean of checkpoints that share an architecture. Sums run in
/// f64, so averaging identical f32 checkpoints reproduces them exactly.
pub fn average_checkpoints<F: Scalar>(checkpoints: &[Checkpoint<F>]) -> Result<Parameters<F>> {
    let first = checkpoints.first().ok_or(Error::NoCheckpoints)?;
    for c in checkpoints {
        if c.config_hash != first.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: first.config_hash,
                found: c.config_hash,
            });
        }
        if c.params.num_params() != first.params.num_params() {
            return Err(Error::ShapeMismatch("checkpoint sizes differ".into()));
        }
    }
    let k = checkpoints.len() as f64;
    let mut out = first.params.clone();
    for (ti, t) in out.tensors.iter_mut().enumerate() {
        for (j, x) in t.data.iter_mut().enumerate() {
            let s: f64 = checkpoints.iter().map(|c| c.params.tensors[ti].data[j].as_f64()).sum();
            *x = F::of(s / k);
        }
    }
    Ok(out)
}

/// Teacher-forced argmax accuracy over non-PAD target tokens.
pub fn token_accuracy<F: Scalar>(params: &Parameters<F>, data: &[SeqPair]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in data.chunks(32) {
        let batch = Batch::from_pairs(chunk)?;
        let out = crate::model::forward(params, &batch, Mode::Eval)?;
        let v = out.vocab_size;
        for b in 0..batch.batch_size {
            for (t, &y) in batch.target_out_row(b).iter().enumerate() {
                if y == crate::tokenizer::PAD {
                    continue;
                }
                let row = &out.logits[(b * out.tgt_len + t) * v..(b * out.tgt_len + t + 1) * v];
                let mut best = 0;
                for k in 1..v {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                hit += (best as u32 == y) as usize;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::NoLossTokens);
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, NormPlacement};
    use crate::tokenizer::EOS;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            d_ffn: 32,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 12,
            max_len: 16,
            norm: NormPlacement::Post,
            ..ModelConfig::desk(12)
        }
    }

    #[test]
    fn lr_spot_values() {
        let s = Schedule {
            lr_max: 4e-4,
            warmup_steps: 4000,
        };
        assert!((lr_at(&s, 4000).unwrap() - 4e-4).abs() < 1e-15);
        assert!((lr_at(&s, 2000).unwrap() - 2e-4).abs() < 1e-15);
        assert!((lr_at(&s, 16000).unwrap() - 2e-4).abs() < 1e-15);
        assert!(lr_at(&s, 0).is_err());
    }

    #[test]
    fn lr_shape() {
        let s = Schedule {
            lr_max: 1.0,
            warmup_steps: 50,
        };
        let lrs: Vec<f64> = (1..200).map(|t| lr_at(&s, t).unwrap()).collect();
        assert!(lrs[..50].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[49..].windows(2).all(|w| w[0] > w[1]));
    }

    fn one_scalar_params(value: f32) -> Parameters<f32> {
        let mut p = init_params::<f32>(&tiny()).unwrap();
        for t in &mut p.tensors {
            t.data.iter_mut().for_each(|x| *x = value);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = init_params::<f32>(&tiny()).unwrap();
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, &FreezeMask::All, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_matches_reference_adam() {
        // Reference: m = (1-b1) g, v = (1-b2) g², m̂ = m/(1-b1), v̂ = v/(1-b2),
        // θ ← θ − lr · m̂ / (sqrt(v̂) + eps).
        let (b1, b2, eps, lr, g) = (0.9f64, 0.98f64, 1e-8f64, 0.1f64, 1.0f64);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let expected = -lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);

        let mut p = one_scalar_params(0.0).cast::<f64>();
        let mut grads = Gradients::zeros_like(&p);
        grads.tensors[0][5] = g;
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        let mask = FreezeMask::Only(vec![MaskRegion {
            tensor: "embed.weight".into(),
            ranges: Some(core::iter::once(5..6).collect()),
        }]);
        adam_step(&mut p, &grads, &mut st, &mask, lr).unwrap();
        assert!((p.tensors[0].data[5] - expected).abs() < 1e-12);
        assert!((expected + 0.1).abs() < 1e-8);
    }

    #[test]
    fn masked_coordinates_are_bit_exact() {
        let mut p = init_params::<f32>(&tiny()).unwrap();
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        g.tensors.iter_mut().flatten().for_each(|x| *x = 1.0);
        let mask = FreezeMask::embedding_row(16, 4);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, &mask, 0.1).unwrap();
        }
        assert_eq!(p.diff_count(&before), 16);
        let e = p.embedding_index();
        for (i, t) in p.tensors.iter().enumerate() {
            for (j, x) in t.data.iter().enumerate() {
                let inside = i == e && (64..80).contains(&j);
                assert_eq!(inside, x.to_bits() != before.tensors[i].data[j].to_bits());
                if !inside {
                    assert_eq!(st.m[i][j].to_bits(), 0);
                    assert_eq!(st.v[i][j].to_bits(), 0);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_fatal() {
        let mut p = init_params::<f32>(&tiny()).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.tensors.pop();
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, &FreezeMask::All, 0.1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn trainable_counts() {
        let p = init_params::<f32>(&tiny()).unwrap();
        assert_eq!(FreezeMask::All.trainable_count(&p).unwrap(), p.num_params());
        assert_eq!(FreezeMask::embedding_row(16, 7).trainable_count(&p).unwrap(), 16);
        let overlapping = FreezeMask::Only(vec![
            MaskRegion {
                tensor: "embed.weight".into(),
                ranges: Some(vec![0..10, 5..20]),
            },
            MaskRegion {
                tensor: "embed.weight".into(),
                ranges: Some(core::iter::once(30..31).collect()),
            },
        ]);
        assert_eq!(overlapping.trainable_count(&p).unwrap(), 21);
        assert!(FreezeMask::embedding_row(16, 12).trainable_count(&p).is_err());
    }

    fn copy_data(n: usize, seed: u64) -> Vec<SeqPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..6);
                let s: Vec<u32> = (0..len).map(|_| rng.gen_range(4..12)).collect();
                SeqPair {
                    source: s.iter().copied().chain([EOS]).collect(),
                    target: s.iter().copied().chain([EOS]).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn zero_steps_is_identity() {
        let p = init_params::<f32>(&tiny()).unwrap();
        let cfg = TrainConfig::new(Schedule::constant(1e-3), 0, 64, 1);
        let out = train_loop(p.clone(), &copy_data(8, 1), &cfg, &FreezeMask::All).unwrap();
        assert_eq!(out.params, p);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let p = init_params::<f32>(&tiny()).unwrap();
        let mut cfg = TrainConfig::new(Schedule::constant(1e-3), 20, 64, 9);
        cfg.checkpoint_every = 5;
        cfg.keep_checkpoints = 3;
        let data = copy_data(40, 2);
        let a = train_loop(p.clone(), &data, &cfg, &FreezeMask::All).unwrap();
        let b = train_loop(p, &data, &cfg, &FreezeMask::All).unwrap();
        assert_eq!(a.params, b.params);
        let steps: Vec<usize> = a.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, [10, 15, 20]);
        assert_eq!(a.checkpoints.last().unwrap().params, a.params);
    }

    #[test]
    fn nonfinite_loss_aborts() {
        let mut p = init_params::<f32>(&tiny()).unwrap();
        p.tensors[0].data[4 * 16] = f32::NAN;
        let cfg = TrainConfig::new(Schedule::constant(1e-3), 5, 64, 1);
        let data = vec![SeqPair {
            source: vec![4, EOS],
            target: vec![4, EOS],
        }];
        assert!(matches!(
            train_loop(p, &data, &cfg, &FreezeMask::All),
            Err(Error::NonFiniteLoss { step: 1, .. })
        ));
    }

    #[test]
    fn learns_toy_copy_task() {
        let cfg = ModelConfig {
            d_model: 32,
            d_ffn: 64,
            n_heads: 4,
            head_dim: 8,
            ..tiny()
        };
        let p = init_params::<f32>(&cfg).unwrap();
        let data = copy_data(500, 3);
        let mut tc = TrainConfig::new(
            Schedule {
                lr_max: 3e-3,
                warmup_steps: 100,
            },
            1500,
            256,
            4,
        );
        tc.log_every = 500;
        let out = train_loop(p, &data, &tc, &FreezeMask::All).unwrap();
        let acc = token_accuracy(&out.params, &copy_data(100, 99)).unwrap();
        assert!(acc > 0.95, "accuracy {acc}, log {:?}", out.log);
    }

    #[test]
    fn batches_respect_budget_and_cover_epoch() {
        let data = copy_data(50, 5);
        let mut s = BatchStream::new(&data, 40, 1).unwrap();
        let mut seen = 0;
        while seen < 50 {
            let b = s.next_batch().unwrap();
            assert!(b.batch_size == 1 || b.batch_size * (b.src_len + b.tgt_len) <= 40);
            seen += b.batch_size;
        }
        assert_eq!(seen, 50);
        assert!(s.queue.is_empty());
    }

    #[test]
    fn averaging() {
        let p = init_params::<f32>(&tiny()).unwrap();
        let c = Checkpoint::new(p.clone(), 1);
        let avg = average_checkpoints(&[c.clone(), c.clone(), c.clone()]).unwrap();
        assert_eq!(avg, p);

        let zero = one_scalar_params(0.0);
        let two = one_scalar_params(2.0);
        let avg = average_checkpoints(&[Checkpoint::new(zero.clone(), 1), Checkpoint::new(two.clone(), 2)]).unwrap();
        assert!(avg.tensors.iter().flat_map(|t| &t.data).all(|&x| x == 1.0));

        let q = init_params::<f32>(&ModelConfig { seed: 8, ..tiny() }).unwrap();
        let list = [
            Checkpoint::new(p.clone(), 1),
            Checkpoint::new(q.clone(), 2),
            Checkpoint::new(two, 3),
        ];
        let rev: Vec<_> = list.iter().rev().cloned().collect();
        assert_eq!(average_checkpoints(&list).unwrap(), average_checkpoints(&rev).unwrap());

        assert_eq!(average_checkpoints::<f32>(&[]).unwrap_err(), Error::NoCheckpoints);
        let other = init_params::<f32>(&ModelConfig { d_ffn: 48, ..tiny() }).unwrap();
        assert!(matches!(
            average_checkpoints(&[c, Checkpoint::new(other, 2)]),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }
}
