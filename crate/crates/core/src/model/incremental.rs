//! Step-wise decoding with cached keys and values.
//!
//! Each decoder position only attends to itself and earlier positions, so the
//! per-layer self-attention keys/values of a prefix never change and can be
//! cached. Logits from [`Parameters::decoder_step`] match the full forward pass.

use alloc::vec::Vec;

use super::net::Net;
use super::scalar::Scalar;
use super::Parameters;
use crate::{Error, Result};

/// Encoder output plus the cross-attention keys/values of every decoder layer.
#[derive(Debug, Clone)]
pub struct EncodedSource<F> {
    pub src_len: usize,
    pub memory: Vec<F>,
    cross_k: Vec<Vec<F>>,
    cross_v: Vec<Vec<F>>,
}

/// Self-attention cache of one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<F> {
    pub position: usize,
    self_k: Vec<Vec<F>>,
    self_v: Vec<Vec<F>>,
}

impl<F: Scalar> Parameters<F> {
    /// Runs the encoder (eval mode) and precomputes cross-attention keys/values.
    pub fn encode_source(&self, src: &[u32]) -> Result<EncodedSource<F>> {
        let v = self.config.vocab_size;
        if let Some(&id) = src.iter().find(|&&id| id as usize >= v) {
            return Err(Error::TokenOutOfRange { id, vocab_size: v });
        }
        if src.is_empty() {
            return Err(Error::EmptySource);
        }
        if src.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: src.len(),
                max_len: self.config.max_len,
            });
        }
        let net = Net::new(self);
        let memory = net.encode_cached(src, &mut None).out;
        let s = src.len();
        let mut cross_k = Vec::with_capacity(self.layout.dec.len());
        let mut cross_v = Vec::with_capacity(self.layout.dec.len());
        for li in &self.layout.dec {
            let a = li.cross_attn;
            cross_k.push(net.projection(a.k, None, &memory, s).0);
            cross_v.push(net.projection(a.v, a.lora_v, &memory, s).0);
        }
        Ok(EncodedSource {
            src_len: s,
            memory,
            cross_k,
            cross_v,
        })
    }

    pub fn start_decoder(&self) -> DecoderState<F> {
        let n = self.layout.dec.len();
        DecoderState {
            position: 0,
            self_k: alloc::vec![Vec::new(); n],
            self_v: alloc::vec![Vec::new(); n],
        }
    }

    /// Feeds `token` at the state's current position and returns the logits
    /// for the next token.
    pub fn decoder_step(&self, enc: &EncodedSource<F>, state: &mut DecoderState<F>, token: u32) -> Result<Vec<F>> {
        let v = self.config.vocab_size;
        if token as usize >= v {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: v,
            });
        }
        if state.position >= self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: state.position + 1,
                max_len: self.config.max_len,
            });
        }
        let net = Net::new(self);
        let mut x = net.embed(&[token], state.position);
        let kv_len = state.position + 1;
        for (l, li) in self.layout.dec.iter().enumerate() {
            let (n1, _) = net.res_in(li.ln1, &x, 1);
            let a = li.self_attn;
            let (q, _) = net.projection(a.q, a.lora_q, &n1, 1);
            let (k, _) = net.projection(a.k, None, &n1, 1);
            let (vv, _) = net.projection(a.v, a.lora_v, &n1, 1);
            state.self_k[l].extend_from_slice(&k);
            state.self_v[l].extend_from_slice(&vv);
            let (ctx, _) = net.attend(&q, &state.self_k[l], &state.self_v[l], 1, kv_len, None);
            let att = net.linear(a.o, &ctx, 1);
            let (h1, _) = net.res_out(li.ln1, li.self_adapter, &x, att, 1, &mut None);

            let (n2, _) = net.res_in(li.ln2, &h1, 1);
            let c = li.cross_attn;
            let (q2, _) = net.projection(c.q, c.lora_q, &n2, 1);
            let (ctx2, _) = net.attend(&q2, &enc.cross_k[l], &enc.cross_v[l], 1, enc.src_len, None);
            let cross = net.linear(c.o, &ctx2, 1);
            let (h2, _) = net.res_out(li.ln2, None, &h1, cross, 1, &mut None);

            let (n3, _) = net.res_in(li.ln3, &h2, 1);
            let (f, _) = net.ffn(li.ffn, &n3, 1);
            let (y, _) = net.res_out(li.ln3, li.ffn_adapter, &h2, f, 1, &mut None);
            x = y;
        }
        if let Some(n) = self.layout.dec_final {
            x = net.layer_norm(n, &x, 1).0;
        }
        state.position += 1;
        Ok(net.output_logits(&x, 1))
    }
}
