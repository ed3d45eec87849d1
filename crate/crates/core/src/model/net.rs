//! Forward pass with caches and the matching reverse sweep.
//!
//! Examples are processed one at a time at their exact lengths, so no
//! attention padding masks are needed; batch-level quantities (the token
//! count that normalizes the loss) are computed up front.
//!
//! The backward helpers take the cached activations, the upstream gradient and
//! the gradient sink explicitly, hence their long argument lists.
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{axpy, bias_grad, dot, log_softmax, matmul, matmul_dw, matmul_dx, softmax_in_place};
use super::params::{AdapterIdx, AttnIdx, FfnIdx, LinearIdx, LoraIdx, NormIdx};
use super::scalar::Scalar;
use super::{Batch, Gradients, NormPlacement, Parameters};
use crate::tokenizer::PAD;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from `seed` (per example).
    Train {
        seed: u64,
    },
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `[B × T × V]`, zero at PAD positions.
    pub logits: Vec<F>,
    /// Mean label-smoothed cross-entropy over non-PAD target tokens.
    pub loss: F,
    pub tgt_len: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradOptions<'a> {
    pub mode: Mode,
    /// Multiplies the loss before differentiation.
    pub loss_scale: f64,
    /// Per-tensor flags; weight gradients are skipped for `false` entries
    /// (their buffers stay zero). `None` means every tensor.
    pub trainable: Option<&'a [bool]>,
}

impl Default for GradOptions<'_> {
    fn default() -> Self {
        GradOptions {
            mode: Mode::Eval,
            loss_scale: 1.0,
            trainable: None,
        }
    }
}

pub(crate) struct Net<'a, F> {
    p: &'a Parameters<F>,
    d: usize,
    heads: usize,
    head_dim: usize,
    pre_norm: bool,
    emb_scale: F,
    dropout: f64,
    lora_scale: F,
}

impl<'a, F: Scalar> Net<'a, F> {
    pub(crate) fn new(p: &'a Parameters<F>) -> Self {
        let c = &p.config;
        Net {
            p,
            d: c.d_model,
            heads: c.n_heads,
            head_dim: c.head_dim,
            pre_norm: c.norm == NormPlacement::Pre,
            emb_scale: F::of(num_traits::Float::sqrt(c.d_model as f64)),
            dropout: c.dropout,
            lora_scale: F::of(p.layout.lora_scale),
        }
    }

    #[inline]
    pub(crate) fn t(&self, i: usize) -> &'a [F] {
        &self.p.tensors[i].data
    }

    pub(crate) fn positional(&self, pos: usize, out: &mut [F]) {
        let d = self.d;
        for i in 0..d / 2 {
            let freq = num_traits::Float::powf(10000.0f64, -((2 * i) as f64) / d as f64);
            let a = pos as f64 * freq;
            out[2 * i] = F::of(num_traits::Float::sin(a));
            out[2 * i + 1] = F::of(num_traits::Float::cos(a));
        }
        if d % 2 == 1 {
            out[d - 1] = F::zero();
        }
    }

    /// `sqrt(d)·E[tok] + PE[pos]` for each position.
    pub(crate) fn embed(&self, ids: &[u32], start: usize) -> Vec<F> {
        let d = self.d;
        let emb = self.t(self.p.layout.embedding);
        let mut x = vec![F::zero(); ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            self.positional(start + t, row);
            axpy(self.emb_scale, &emb[id as usize * d..(id as usize + 1) * d], row);
        }
        x
    }

    pub(crate) fn linear(&self, l: LinearIdx, x: &[F], rows: usize) -> Vec<F> {
        let mut y = vec![F::zero(); rows * l.dout];
        matmul(x, self.t(l.w), Some(self.t(l.b)), rows, l.din, l.dout, &mut y);
        y
    }

    /// `x·W + b (+ s·(x·A)·B)`; returns the output and the `x·A` intermediate.
    pub(crate) fn projection(&self, l: LinearIdx, lora: Option<LoraIdx>, x: &[F], rows: usize) -> (Vec<F>, Vec<F>) {
        let mut y = self.linear(l, x, rows);
        let mut xa = Vec::new();
        if let Some(lo) = lora {
            xa = vec![F::zero(); rows * lo.rank];
            matmul(x, self.t(lo.a), None, rows, l.din, lo.rank, &mut xa);
            let mut delta = vec![F::zero(); rows * l.dout];
            matmul(&xa, self.t(lo.b), None, rows, lo.rank, l.dout, &mut delta);
            axpy(self.lora_scale, &delta, &mut y);
        }
        (y, xa)
    }

    pub(crate) fn layer_norm(&self, n: NormIdx, x: &[F], rows: usize) -> (Vec<F>, NormCache<F>) {
        let d = self.d;
        let (g, b) = (self.t(n.gain), self.t(n.bias));
        let mut y = vec![F::zero(); rows * d];
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let inv_d = F::of(1.0 / d as f64);
        for t in 0..rows {
            let xr = &x[t * d..(t + 1) * d];
            let mean = xr.iter().copied().sum::<F>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + F::of(LN_EPS)).sqrt();
            rstd[t] = r;
            for i in 0..d {
                let h = (xr[i] - mean) * r;
                xhat[t * d + i] = h;
                y[t * d + i] = g[i] * h + b[i];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    /// Scaled dot-product multi-head attention over `q`/`k`/`v` rows.
    pub(crate) fn attend(
        &self,
        q: &[F],
        k: &[F],
        v: &[F],
        tq: usize,
        tk: usize,
        causal_offset: Option<usize>,
    ) -> (Vec<F>, Vec<F>) {
        let (d, hd) = (self.d, self.head_dim);
        let inv = F::one() / F::of(hd as f64).sqrt();
        let mut probs = vec![F::zero(); self.heads * tq * tk];
        let mut ctx = vec![F::zero(); tq * d];
        for h in 0..self.heads {
            let o = h * hd;
            for i in 0..tq {
                let visible = match causal_offset {
                    Some(off) => (off + i + 1).min(tk),
                    None => tk,
                };
                let row = &mut probs[(h * tq + i) * tk..(h * tq + i) * tk + visible];
                let qi = &q[i * d + o..i * d + o + hd];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k[j * d + o..j * d + o + hd]) * inv;
                }
                softmax_in_place(row);
                let c = &mut ctx[i * d + o..i * d + o + hd];
                for (j, &pij) in row.iter().enumerate() {
                    axpy(pij, &v[j * d + o..j * d + o + hd], c);
                }
            }
        }
        (ctx, probs)
    }

    fn attention(
        &self,
        a: AttnIdx,
        xq: &[F],
        tq: usize,
        xkv: Option<&[F]>,
        tk: usize,
        causal: bool,
    ) -> (Vec<F>, AttnCache<F>) {
        let kv_src = xkv.unwrap_or(xq);
        let (q, qa) = self.projection(a.q, a.lora_q, xq, tq);
        let (k, _) = self.projection(a.k, None, kv_src, tk);
        let (v, va) = self.projection(a.v, a.lora_v, kv_src, tk);
        let (ctx, probs) = self.attend(&q, &k, &v, tq, tk, causal.then_some(0));
        let out = self.linear(a.o, &ctx, tq);
        let cache = AttnCache {
            xq: xq.to_vec(),
            xkv: xkv.map(<[F]>::to_vec),
            tq,
            tk,
            q,
            k,
            v,
            qa,
            va,
            probs,
            ctx,
        };
        (out, cache)
    }

    pub(crate) fn ffn(&self, f: FfnIdx, x: &[F], rows: usize) -> (Vec<F>, FfnCache<F>) {
        let pre = self.linear(f.fc1, x, rows);
        let act: Vec<F> = pre.iter().map(|&v| v.max(F::zero())).collect();
        let out = self.linear(f.fc2, &act, rows);
        (out, FfnCache { x: x.to_vec(), pre })
    }

    pub(crate) fn adapter_fwd(&self, a: AdapterIdx, z: &[F], rows: usize) -> (Vec<F>, AdapterCache<F>) {
        let pre = self.linear(a.down, z, rows);
        let act: Vec<F> = pre.iter().map(|&v| v.max(F::zero())).collect();
        let mut out = self.linear(a.up, &act, rows);
        for (o, &zi) in out.iter_mut().zip(z) {
            *o += zi;
        }
        (out, AdapterCache { z: z.to_vec(), pre })
    }

    fn dropout_mask(&self, n: usize, rng: &mut Option<ChaCha8Rng>) -> Option<Vec<F>> {
        let rng = rng.as_mut()?;
        let keep = F::of(1.0 / (1.0 - self.dropout));
        Some(
            (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < self.dropout {
                        F::zero()
                    } else {
                        keep
                    }
                })
                .collect(),
        )
    }

    /// Input side of a residual block: the sublayer sees `LN(x)` under
    /// pre-norm and `x` itself under post-norm.
    pub(crate) fn res_in(&self, n: NormIdx, x: &[F], rows: usize) -> (Vec<F>, Option<NormCache<F>>) {
        if self.pre_norm {
            let (y, c) = self.layer_norm(n, x, rows);
            (y, Some(c))
        } else {
            (x.to_vec(), None)
        }
    }

    /// Output side: optional adapter, dropout, residual add, and (post-norm) LN.
    pub(crate) fn res_out(
        &self,
        n: NormIdx,
        adapter: Option<AdapterIdx>,
        x: &[F],
        s: Vec<F>,
        rows: usize,
        rng: &mut Option<ChaCha8Rng>,
    ) -> (Vec<F>, ResCache<F>) {
        let (mut s, adapter_cache) = match adapter {
            Some(a) => {
                let (o, c) = self.adapter_fwd(a, &s, rows);
                (o, Some(c))
            }
            None => (s, None),
        };
        let mask = self.dropout_mask(s.len(), rng);
        if let Some(m) = &mask {
            for (v, &k) in s.iter_mut().zip(m) {
                *v *= k;
            }
        }
        for (v, &xi) in s.iter_mut().zip(x) {
            *v += xi;
        }
        let (y, norm) = if self.pre_norm {
            (s, None)
        } else {
            let (y, c) = self.layer_norm(n, &s, rows);
            (y, Some(c))
        };
        (
            y,
            ResCache {
                norm_in: None,
                norm_out: norm,
                adapter: adapter_cache,
                mask,
            },
        )
    }

    pub(crate) fn encode_cached(&self, src: &[u32], rng: &mut Option<ChaCha8Rng>) -> EncCache<F> {
        let l = &self.p.layout;
        let s = src.len();
        let mut x = self.embed(src, 0);
        let in_mask = self.dropout_mask(x.len(), rng);
        if let Some(m) = &in_mask {
            x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        let mut layers = Vec::with_capacity(l.enc.len());
        for li in &l.enc {
            let x_in = x;
            let (n1, norm1) = self.res_in(li.ln1, &x_in, s);
            let (a, attn) = self.attention(li.attn, &n1, s, None, s, false);
            let (h, mut r1) = self.res_out(li.ln1, li.attn_adapter, &x_in, a, s, rng);
            r1.norm_in = norm1;
            let (n2, norm2) = self.res_in(li.ln2, &h, s);
            let (f, ffn) = self.ffn(li.ffn, &n2, s);
            let (y, mut r2) = self.res_out(li.ln2, li.ffn_adapter, &h, f, s, rng);
            r2.norm_in = norm2;
            layers.push(EncLayerCache { attn, r1, ffn, r2 });
            x = y;
        }
        let final_norm = l.enc_final.map(|n| {
            let (y, c) = self.layer_norm(n, &x, s);
            x = y;
            c
        });
        EncCache {
            in_mask,
            layers,
            final_norm,
            out: x,
        }
    }

    fn decode_cached(
        &self,
        tgt_in: &[u32],
        enc_out: &[F],
        src_len: usize,
        rng: &mut Option<ChaCha8Rng>,
    ) -> DecCache<F> {
        let l = &self.p.layout;
        let t = tgt_in.len();
        let mut x = self.embed(tgt_in, 0);
        let in_mask = self.dropout_mask(x.len(), rng);
        if let Some(m) = &in_mask {
            x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        let mut layers = Vec::with_capacity(l.dec.len());
        for li in &l.dec {
            let x_in = x;
            let (n1, norm1) = self.res_in(li.ln1, &x_in, t);
            let (a, self_attn) = self.attention(li.self_attn, &n1, t, None, t, true);
            let (h1, mut r1) = self.res_out(li.ln1, li.self_adapter, &x_in, a, t, rng);
            r1.norm_in = norm1;
            let (n2, norm2) = self.res_in(li.ln2, &h1, t);
            let (c, cross_attn) = self.attention(li.cross_attn, &n2, t, Some(enc_out), src_len, false);
            let (h2, mut r2) = self.res_out(li.ln2, None, &h1, c, t, rng);
            r2.norm_in = norm2;
            let (n3, norm3) = self.res_in(li.ln3, &h2, t);
            let (f, ffn) = self.ffn(li.ffn, &n3, t);
            let (y, mut r3) = self.res_out(li.ln3, li.ffn_adapter, &h2, f, t, rng);
            r3.norm_in = norm3;
            layers.push(DecLayerCache {
                self_attn,
                r1,
                cross_attn,
                r2,
                ffn,
                r3,
            });
            x = y;
        }
        let final_norm = l.dec_final.map(|n| {
            let (y, c) = self.layer_norm(n, &x, t);
            x = y;
            c
        });
        DecCache {
            in_mask,
            layers,
            final_norm,
            out: x,
        }
    }

    /// `h · Eᵀ` for each row of `h`.
    pub(crate) fn output_logits(&self, h: &[F], rows: usize) -> Vec<F> {
        let d = self.d;
        let emb = self.t(self.p.layout.embedding);
        let v = self.p.config.vocab_size;
        let mut logits = vec![F::zero(); rows * v];
        for t in 0..rows {
            let hr = &h[t * d..(t + 1) * d];
            for (k, out) in logits[t * v..(t + 1) * v].iter_mut().enumerate() {
                *out = dot(hr, &emb[k * d..(k + 1) * d]);
            }
        }
        logits
    }

    fn example(&self, src: &[u32], tgt_in: &[u32], rng: &mut Option<ChaCha8Rng>) -> ExampleCache<F> {
        let enc = self.encode_cached(src, rng);
        let dec = self.decode_cached(tgt_in, &enc.out, src.len(), rng);
        let logits = self.output_logits(&dec.out, tgt_in.len());
        ExampleCache { enc, dec, logits }
    }

    // ---- reverse sweep -------------------------------------------------

    fn want(&self, need: Option<&[bool]>, i: usize) -> bool {
        need.is_none_or(|n| n[i])
    }

    fn linear_back(
        &self,
        l: LinearIdx,
        x: &[F],
        dy: &[F],
        rows: usize,
        dx: Option<&mut [F]>,
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) {
        if self.want(need, l.w) {
            matmul_dw(x, dy, rows, l.din, l.dout, &mut g.tensors[l.w]);
        }
        if self.want(need, l.b) {
            bias_grad(dy, rows, l.dout, &mut g.tensors[l.b]);
        }
        if let Some(dx) = dx {
            matmul_dx(dy, self.t(l.w), rows, l.din, l.dout, dx);
        }
    }

    fn projection_back(
        &self,
        l: LinearIdx,
        lora: Option<LoraIdx>,
        x: &[F],
        xa: &[F],
        dy: &[F],
        rows: usize,
        dx: &mut [F],
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) {
        self.linear_back(l, x, dy, rows, Some(&mut *dx), g, need);
        if let Some(lo) = lora {
            let scaled: Vec<F> = dy.iter().map(|&v| v * self.lora_scale).collect();
            if self.want(need, lo.b) {
                matmul_dw(xa, &scaled, rows, lo.rank, l.dout, &mut g.tensors[lo.b]);
            }
            let mut dxa = vec![F::zero(); rows * lo.rank];
            matmul_dx(&scaled, self.t(lo.b), rows, lo.rank, l.dout, &mut dxa);
            if self.want(need, lo.a) {
                matmul_dw(x, &dxa, rows, l.din, lo.rank, &mut g.tensors[lo.a]);
            }
            matmul_dx(&dxa, self.t(lo.a), rows, l.din, lo.rank, dx);
        }
    }

    fn layer_norm_back(
        &self,
        n: NormIdx,
        c: &NormCache<F>,
        dy: &[F],
        rows: usize,
        dx: &mut [F],
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) {
        let d = self.d;
        let gain = self.t(n.gain);
        let inv_d = F::of(1.0 / d as f64);
        let (want_g, want_b) = (self.want(need, n.gain), self.want(need, n.bias));
        for t in 0..rows {
            let xh = &c.xhat[t * d..(t + 1) * d];
            let dyr = &dy[t * d..(t + 1) * d];
            let mut mean_dxh = F::zero();
            let mut mean_dxh_xh = F::zero();
            for i in 0..d {
                let dxh = dyr[i] * gain[i];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[i];
            }
            mean_dxh *= inv_d;
            mean_dxh_xh *= inv_d;
            let r = c.rstd[t];
            for i in 0..d {
                let dxh = dyr[i] * gain[i];
                dx[t * d + i] += r * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
            }
            if want_g {
                for i in 0..d {
                    g.tensors[n.gain][i] += dyr[i] * xh[i];
                }
            }
            if want_b {
                for i in 0..d {
                    g.tensors[n.bias][i] += dyr[i];
                }
            }
        }
    }

    /// Returns (d xq, d xkv) where the latter is `None` for self-attention
    /// (its contribution is folded into d xq).
    fn attention_back(
        &self,
        a: AttnIdx,
        c: &AttnCache<F>,
        dout: &[F],
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) -> (Vec<F>, Option<Vec<F>>) {
        let (d, hd, tq, tk) = (self.d, self.head_dim, c.tq, c.tk);
        let inv = F::one() / F::of(hd as f64).sqrt();
        let mut dctx = vec![F::zero(); tq * d];
        self.linear_back(a.o, &c.ctx, dout, tq, Some(&mut dctx), g, need);

        let mut dq = vec![F::zero(); tq * d];
        let mut dk = vec![F::zero(); tk * d];
        let mut dv = vec![F::zero(); tk * d];
        let mut dp = vec![F::zero(); tk];
        for h in 0..self.heads {
            let o = h * hd;
            for i in 0..tq {
                let p = &c.probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let dci = &dctx[i * d + o..i * d + o + hd];
                let mut weighted = F::zero();
                for j in 0..tk {
                    if p[j] == F::zero() {
                        dp[j] = F::zero();
                        continue;
                    }
                    dp[j] = dot(dci, &c.v[j * d + o..j * d + o + hd]);
                    weighted += p[j] * dp[j];
                    axpy(p[j], dci, &mut dv[j * d + o..j * d + o + hd]);
                }
                for j in 0..tk {
                    if p[j] == F::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * inv;
                    axpy(ds, &c.k[j * d + o..j * d + o + hd], &mut dq[i * d + o..i * d + o + hd]);
                    axpy(ds, &c.q[i * d + o..i * d + o + hd], &mut dk[j * d + o..j * d + o + hd]);
                }
            }
        }

        let mut dxq = vec![F::zero(); tq * d];
        self.projection_back(a.q, a.lora_q, &c.xq, &c.qa, &dq, tq, &mut dxq, g, need);
        match &c.xkv {
            None => {
                self.projection_back(a.k, None, &c.xq, &[], &dk, tk, &mut dxq, g, need);
                self.projection_back(a.v, a.lora_v, &c.xq, &c.va, &dv, tk, &mut dxq, g, need);
                (dxq, None)
            }
            Some(xkv) => {
                let mut dxkv = vec![F::zero(); tk * d];
                self.projection_back(a.k, None, xkv, &[], &dk, tk, &mut dxkv, g, need);
                self.projection_back(a.v, a.lora_v, xkv, &c.va, &dv, tk, &mut dxkv, g, need);
                (dxq, Some(dxkv))
            }
        }
    }

    fn relu_mlp_back(
        &self,
        l1: LinearIdx,
        l2: LinearIdx,
        x: &[F],
        pre: &[F],
        dout: &[F],
        rows: usize,
        dx: &mut [F],
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) {
        let act: Vec<F> = pre.iter().map(|&v| v.max(F::zero())).collect();
        let mut dact = vec![F::zero(); rows * l2.din];
        self.linear_back(l2, &act, dout, rows, Some(&mut dact), g, need);
        for (da, &p) in dact.iter_mut().zip(pre) {
            if p <= F::zero() {
                *da = F::zero();
            }
        }
        self.linear_back(l1, x, &dact, rows, Some(dx), g, need);
    }

    /// Reverse of [`Self::res_out`]: returns (d x from the skip path, d s).
    fn res_out_back(
        &self,
        n: NormIdx,
        adapter: Option<AdapterIdx>,
        c: &ResCache<F>,
        dy: Vec<F>,
        rows: usize,
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) -> (Vec<F>, Vec<F>) {
        let dr = match &c.norm_out {
            Some(nc) => {
                let mut dr = vec![F::zero(); dy.len()];
                self.layer_norm_back(n, nc, &dy, rows, &mut dr, g, need);
                dr
            }
            None => dy,
        };
        let mut ds = dr.clone();
        if let Some(m) = &c.mask {
            ds.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        if let (Some(a), Some(ac)) = (adapter, &c.adapter) {
            let mut dz = ds.clone();
            self.relu_mlp_back(a.down, a.up, &ac.z, &ac.pre, &ds, rows, &mut dz, g, need);
            ds = dz;
        }
        (dr, ds)
    }

    /// Reverse of [`Self::res_in`]: adds the sublayer-input gradient into `dx`.
    fn res_in_back(
        &self,
        n: NormIdx,
        c: &ResCache<F>,
        dn: &[F],
        rows: usize,
        dx: &mut [F],
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) {
        match &c.norm_in {
            Some(nc) => self.layer_norm_back(n, nc, dn, rows, dx, g, need),
            None => dx.iter_mut().zip(dn).for_each(|(a, &b)| *a += b),
        }
    }

    fn embed_back(
        &self,
        ids: &[u32],
        mask: &Option<Vec<F>>,
        dx: &mut [F],
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) {
        let e = self.p.layout.embedding;
        if !self.want(need, e) {
            return;
        }
        let d = self.d;
        if let Some(m) = mask {
            dx.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        for (t, &id) in ids.iter().enumerate() {
            axpy(
                self.emb_scale,
                &dx[t * d..(t + 1) * d],
                &mut g.tensors[e][id as usize * d..(id as usize + 1) * d],
            );
        }
    }

    fn backward_example(
        &self,
        src: &[u32],
        tgt_in: &[u32],
        cache: &ExampleCache<F>,
        dlogits: &[F],
        g: &mut Gradients<F>,
        need: Option<&[bool]>,
    ) {
        let l = &self.p.layout;
        let d = self.d;
        let t = tgt_in.len();
        let s = src.len();
        let v = self.p.config.vocab_size;
        let emb_idx = l.embedding;
        let emb = self.t(emb_idx);

        // Output projection through the shared embedding.
        let mut dh = vec![F::zero(); t * d];
        let want_emb = self.want(need, emb_idx);
        for ti in 0..t {
            let gl = &dlogits[ti * v..(ti + 1) * v];
            let hr = &cache.dec.out[ti * d..(ti + 1) * d];
            let dhr = &mut dh[ti * d..(ti + 1) * d];
            for (k, &gk) in gl.iter().enumerate() {
                if gk == F::zero() {
                    continue;
                }
                axpy(gk, &emb[k * d..(k + 1) * d], dhr);
                if want_emb {
                    axpy(gk, hr, &mut g.tensors[emb_idx][k * d..(k + 1) * d]);
                }
            }
        }

        if let (Some(n), Some(nc)) = (l.dec_final, &cache.dec.final_norm) {
            let mut dx = vec![F::zero(); t * d];
            self.layer_norm_back(n, nc, &dh, t, &mut dx, g, need);
            dh = dx;
        }

        let mut d_enc = vec![F::zero(); s * d];
        for (li, lc) in l.dec.iter().zip(&cache.dec.layers).rev() {
            let (mut dx, ds) = self.res_out_back(li.ln3, li.ffn_adapter, &lc.r3, dh, t, g, need);
            let mut dn = vec![F::zero(); t * d];
            self.relu_mlp_back(li.ffn.fc1, li.ffn.fc2, &lc.ffn.x, &lc.ffn.pre, &ds, t, &mut dn, g, need);
            self.res_in_back(li.ln3, &lc.r3, &dn, t, &mut dx, g, need);

            let (mut dx2, ds) = self.res_out_back(li.ln2, None, &lc.r2, dx, t, g, need);
            let (dn, dkv) = self.attention_back(li.cross_attn, &lc.cross_attn, &ds, g, need);
            if let Some(dkv) = dkv {
                d_enc.iter_mut().zip(&dkv).for_each(|(a, &b)| *a += b);
            }
            self.res_in_back(li.ln2, &lc.r2, &dn, t, &mut dx2, g, need);

            let (mut dx1, ds) = self.res_out_back(li.ln1, li.self_adapter, &lc.r1, dx2, t, g, need);
            let (dn, _) = self.attention_back(li.self_attn, &lc.self_attn, &ds, g, need);
            self.res_in_back(li.ln1, &lc.r1, &dn, t, &mut dx1, g, need);
            dh = dx1;
        }
        self.embed_back(tgt_in, &cache.dec.in_mask, &mut dh, g, need);

        let mut de = d_enc;
        if let (Some(n), Some(nc)) = (l.enc_final, &cache.enc.final_norm) {
            let mut dx = vec![F::zero(); s * d];
            self.layer_norm_back(n, nc, &de, s, &mut dx, g, need);
            de = dx;
        }
        for (li, lc) in l.enc.iter().zip(&cache.enc.layers).rev() {
            let (mut dx, ds) = self.res_out_back(li.ln2, li.ffn_adapter, &lc.r2, de, s, g, need);
            let mut dn = vec![F::zero(); s * d];
            self.relu_mlp_back(li.ffn.fc1, li.ffn.fc2, &lc.ffn.x, &lc.ffn.pre, &ds, s, &mut dn, g, need);
            self.res_in_back(li.ln2, &lc.r2, &dn, s, &mut dx, g, need);

            let (mut dx1, ds) = self.res_out_back(li.ln1, li.attn_adapter, &lc.r1, dx, s, g, need);
            let (dn, _) = self.attention_back(li.attn, &lc.attn, &ds, g, need);
            self.res_in_back(li.ln1, &lc.r1, &dn, s, &mut dx1, g, need);
            de = dx1;
        }
        self.embed_back(src, &cache.enc.in_mask, &mut de, g, need);
    }
}

pub(crate) struct NormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct AttnCache<F> {
    xq: Vec<F>,
    xkv: Option<Vec<F>>,
    tq: usize,
    tk: usize,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    qa: Vec<F>,
    va: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
}

pub(crate) struct FfnCache<F> {
    x: Vec<F>,
    pre: Vec<F>,
}

pub(crate) struct AdapterCache<F> {
    z: Vec<F>,
    pre: Vec<F>,
}

pub(crate) struct ResCache<F> {
    norm_in: Option<NormCache<F>>,
    norm_out: Option<NormCache<F>>,
    adapter: Option<AdapterCache<F>>,
    mask: Option<Vec<F>>,
}

struct EncLayerCache<F> {
    attn: AttnCache<F>,
    r1: ResCache<F>,
    ffn: FfnCache<F>,
    r2: ResCache<F>,
}

struct DecLayerCache<F> {
    self_attn: AttnCache<F>,
    r1: ResCache<F>,
    cross_attn: AttnCache<F>,
    r2: ResCache<F>,
    ffn: FfnCache<F>,
    r3: ResCache<F>,
}

pub(crate) struct EncCache<F> {
    in_mask: Option<Vec<F>>,
    layers: Vec<EncLayerCache<F>>,
    final_norm: Option<NormCache<F>>,
    pub(crate) out: Vec<F>,
}

struct DecCache<F> {
    in_mask: Option<Vec<F>>,
    layers: Vec<DecLayerCache<F>>,
    final_norm: Option<NormCache<F>>,
    out: Vec<F>,
}

struct ExampleCache<F> {
    enc: EncCache<F>,
    dec: DecCache<F>,
    logits: Vec<F>,
}

fn validate_batch<F: Scalar>(p: &Parameters<F>, batch: &Batch) -> Result<()> {
    let v = p.config.vocab_size;
    for &id in batch.source.iter().chain(&batch.target_in).chain(&batch.target_out) {
        if id as usize >= v {
            return Err(Error::TokenOutOfRange { id, vocab_size: v });
        }
    }
    let longest = batch.src_len.max(batch.tgt_len);
    if longest > p.config.max_len {
        return Err(Error::SequenceTooLong {
            len: longest,
            max_len: p.config.max_len,
        });
    }
    if batch.loss_tokens() == 0 {
        return Err(Error::NoLossTokens);
    }
    Ok(())
}

fn example_rng(mode: Mode, dropout: f64, index: usize) -> Option<ChaCha8Rng> {
    match mode {
        Mode::Train { seed } if dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(
            seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )),
        _ => None,
    }
}

/// Label-smoothed token loss for one logits row, plus `softmax - q` written
/// to `grad` (unscaled).
fn token_loss<F: Scalar>(logits: &[F], target: u32, eps: f64, grad: Option<&mut [F]>) -> F {
    let v = logits.len();
    let mut lp = vec![F::zero(); v];
    log_softmax(logits, &mut lp);
    let smooth = F::of(eps / v as f64);
    let mut loss = -(F::one() - F::of(eps)) * lp[target as usize];
    if eps > 0.0 {
        loss -= smooth * lp.iter().copied().sum::<F>();
    }
    if let Some(g) = grad {
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = lp[k].exp() - smooth;
        }
        g[target as usize] -= F::one() - F::of(eps);
    }
    loss
}

/// Runs the model over a batch and returns padded logits and the mean loss.
pub fn forward<F: Scalar>(params: &Parameters<F>, batch: &Batch, mode: Mode) -> Result<ForwardOutput<F>> {
    validate_batch(params, batch)?;
    let net = Net::new(params);
    let v = params.config.vocab_size;
    let eps = params.config.label_smoothing;
    let mut logits = vec![F::zero(); batch.batch_size * batch.tgt_len * v];
    let mut total = F::zero();
    for i in 0..batch.batch_size {
        let mut rng = example_rng(mode, net.dropout, i);
        let cache = net.example(batch.source_row(i), batch.target_in_row(i), &mut rng);
        let out = batch.target_out_row(i);
        for (t, &y) in out.iter().enumerate() {
            if y == PAD {
                continue;
            }
            total += token_loss(&cache.logits[t * v..(t + 1) * v], y, eps, None);
        }
        let base = i * batch.tgt_len * v;
        logits[base..base + cache.logits.len()].copy_from_slice(&cache.logits);
    }
    Ok(ForwardOutput {
        logits,
        loss: total / F::of(batch.loss_tokens() as f64),
        tgt_len: batch.tgt_len,
        vocab_size: v,
    })
}

/// Summed token loss of each example (eval mode).
pub fn per_example_losses<F: Scalar>(params: &Parameters<F>, batch: &Batch) -> Result<Vec<F>> {
    validate_batch(params, batch)?;
    let net = Net::new(params);
    let v = params.config.vocab_size;
    let eps = params.config.label_smoothing;
    (0..batch.batch_size)
        .map(|i| {
            let cache = net.example(batch.source_row(i), batch.target_in_row(i), &mut None);
            Ok(batch
                .target_out_row(i)
                .iter()
                .enumerate()
                .filter(|(_, &y)| y != PAD)
                .map(|(t, &y)| token_loss(&cache.logits[t * v..(t + 1) * v], y, eps, None))
                .sum())
        })
        .collect()
}

/// Mean loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad<F: Scalar>(
    params: &Parameters<F>,
    batch: &Batch,
    opts: GradOptions<'_>,
) -> Result<(F, Gradients<F>)> {
    validate_batch(params, batch)?;
    if let Some(t) = opts.trainable {
        if t.len() != params.tensors.len() {
            return Err(Error::ShapeMismatch("trainable flags do not match tensors".into()));
        }
    }
    let net = Net::new(params);
    let v = params.config.vocab_size;
    let eps = params.config.label_smoothing;
    let n_tokens = batch.loss_tokens();
    let scale = F::of(opts.loss_scale / n_tokens as f64);
    let mut grads = Gradients::zeros_like(params);
    let mut total = F::zero();
    for i in 0..batch.batch_size {
        let mut rng = example_rng(opts.mode, net.dropout, i);
        let src = batch.source_row(i);
        let tgt_in = batch.target_in_row(i);
        let cache = net.example(src, tgt_in, &mut rng);
        let out = batch.target_out_row(i);
        let mut dlogits = vec![F::zero(); out.len() * v];
        for (t, &y) in out.iter().enumerate() {
            if y == PAD {
                continue;
            }
            let row = &mut dlogits[t * v..(t + 1) * v];
            total += token_loss(&cache.logits[t * v..(t + 1) * v], y, eps, Some(row));
            row.iter_mut().for_each(|g| *g *= scale);
        }
        net.backward_example(src, tgt_in, &cache, &dlogits, &mut grads, opts.trainable);
    }
    Ok((total / F::of(n_tokens as f64), grads))
}
