use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major `[rows, len]` token ids, right-padded with `pad`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    rows: usize,
    len: usize,
    ids: Vec<usize>,
    pad: Option<usize>,
}

impl TokenBatch {
    pub fn new(rows: usize, len: usize, ids: Vec<usize>, pad: Option<usize>) -> Result<Self> {
        if rows * len != ids.len() {
            return Err(Error::dim("token batch", &[rows, len], &[ids.len()]));
        }
        if rows == 0 || len == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { rows, len, ids, pad })
    }

    /// Pads every sequence to the longest one. Without a pad id all
    /// sequences must have the same length.
    pub fn from_rows(seqs: &[Vec<usize>], pad: Option<usize>) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() != len && pad.is_none() {
                return Err(Error::invalid("ragged rows need a pad id"));
            }
            ids.extend_from_slice(s);
            ids.extend(core::iter::repeat_n(pad.unwrap_or(0), len - s.len()));
        }
        Self::new(seqs.len(), len, ids, pad)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Padded sequence length.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn pad(&self) -> Option<usize> {
        self.pad
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    pub fn is_pad(&self, r: usize, j: usize) -> bool {
        Some(self.ids[r * self.len + j]) == self.pad
    }

    pub fn has_padding(&self) -> bool {
        self.pad.is_some_and(|p| self.ids.contains(&p))
    }

    /// Number of non-pad tokens.
    pub fn token_count(&self) -> usize {
        match self.pad {
            Some(p) => self.ids.iter().filter(|&&t| t != p).count(),
            None => self.ids.len(),
        }
    }

    pub fn max_id(&self) -> usize {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Columns `start..start + width` of every row.
    pub fn columns(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.len {
            return Err(Error::dim("token batch columns", &[self.len], &[start, width]));
        }
        let ids = (0..self.rows).flat_map(|r| self.row(r)[start..start + width].iter().copied()).collect();
        Self::new(self.rows, width, ids, self.pad)
    }

    /// All positions but the last: the model input for next-token prediction.
    pub fn inputs(&self) -> Result<Self> {
        self.columns(0, self.len.saturating_sub(1))
    }

    /// All positions but the first: next-token labels.
    pub fn labels(&self) -> Result<Self> {
        self.columns(1.min(self.len), self.len.saturating_sub(1))
    }
}

/// Source / target pair for the encoder-decoder. Targets are stored with
/// their BOS and EOS tokens; the decoder reads `target.inputs()` and is
/// scored on `target.labels()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub source: TokenBatch,
    pub target: TokenBatch,
}

impl SeqBatch {
    pub fn new(source: TokenBatch, target: TokenBatch) -> Result<Self> {
        if source.rows() != target.rows() {
            return Err(Error::dim("seq batch", &[source.rows()], &[target.rows()]));
        }
        if target.len() < 2 {
            return Err(Error::invalid("targets need at least BOS and one more token"));
        }
        Ok(Self { source, target })
    }

    pub fn rows(&self) -> usize {
        self.source.rows()
    }
}
