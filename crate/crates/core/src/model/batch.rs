use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::TaggedExample;
use crate::tokenizer::{BOS, PAD};
use crate::{Error, Result};

/// Token ids of one training pair. `target` ends in EOS; the decoder input is
/// derived by shifting right with BOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl From<TaggedExample> for SeqPair {
    fn from(e: TaggedExample) -> Self {
        SeqPair {
            source: e.source_tokens,
            target: e.target_tokens,
        }
    }
}

impl From<&TaggedExample> for SeqPair {
    fn from(e: &TaggedExample) -> Self {
        SeqPair {
            source: e.source_tokens.clone(),
            target: e.target_tokens.clone(),
        }
    }
}

/// Padded batch. Rows are `[B × S]` / `[B × T]`, PAD-filled past each length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub source: Vec<u32>,
    pub target_in: Vec<u32>,
    pub target_out: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SeqPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let src_len = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let b = pairs.len();
        let mut source = alloc::vec![PAD; b * src_len];
        let mut target_in = alloc::vec![PAD; b * tgt_len];
        let mut target_out = alloc::vec![PAD; b * tgt_len];
        for (i, p) in pairs.iter().enumerate() {
            if p.source.is_empty() {
                return Err(Error::EmptySource);
            }
            source[i * src_len..i * src_len + p.source.len()].copy_from_slice(&p.source);
            let row = i * tgt_len;
            target_out[row..row + p.target.len()].copy_from_slice(&p.target);
            if !p.target.is_empty() {
                target_in[row] = BOS;
                target_in[row + 1..row + p.target.len()].copy_from_slice(&p.target[..p.target.len() - 1]);
            }
        }
        Ok(Batch {
            batch_size: b,
            src_len,
            tgt_len,
            source,
            target_in,
            target_out,
            src_lens: pairs.iter().map(|p| p.source.len()).collect(),
            tgt_lens: pairs.iter().map(|p| p.target.len()).collect(),
        })
    }

    pub fn source_row(&self, i: usize) -> &[u32] {
        &self.source[i * self.src_len..i * self.src_len + self.src_lens[i]]
    }

    pub fn target_in_row(&self, i: usize) -> &[u32] {
        &self.target_in[i * self.tgt_len..i * self.tgt_len + self.tgt_lens[i]]
    }

    pub fn target_out_row(&self, i: usize) -> &[u32] {
        &self.target_out[i * self.tgt_len..i * self.tgt_len + self.tgt_lens[i]]
    }

    /// `true` at non-PAD target positions.
    pub fn target_mask(&self) -> Vec<bool> {
        self.target_out.iter().map(|&t| t != PAD).collect()
    }

    /// Number of target positions that contribute to the loss.
    pub fn loss_tokens(&self) -> usize {
        self.target_out.iter().filter(|&&t| t != PAD).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn shifts_and_pads() {
        let b = Batch::from_pairs(&[
            SeqPair {
                source: vec![5, 6, 2],
                target: vec![7, 8, 2],
            },
            SeqPair {
                source: vec![9, 2],
                target: vec![2],
            },
        ])
        .unwrap();
        assert_eq!(b.source, vec![5, 6, 2, 9, 2, 0]);
        assert_eq!(b.target_in, vec![BOS, 7, 8, BOS, 0, 0]);
        assert_eq!(b.target_out, vec![7, 8, 2, 2, 0, 0]);
        assert_eq!(b.loss_tokens(), 4);
        assert_eq!(b.target_in_row(1), &[BOS]);
    }
}
