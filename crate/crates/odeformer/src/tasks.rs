//! Task data: synthetic copy / reverse sequences and a character corpus.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context};
use odeformer_core::model::{SeqBatch, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First content token id of the synthetic tasks.
pub const FIRST_CONTENT: usize = 3;

/// Plain text shipped with the crate: the license texts found under
/// `/usr/share/common-licenses` on Debian systems, concatenated.
pub const BUNDLED_CORPUS: &str = include_str!("../data/licenses.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    CharLm,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::CharLm => "charlm",
        })
    }
}

impl FromStr for TaskKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "copy" => TaskKind::Copy,
            "reverse" => TaskKind::Reverse,
            "charlm" | "char_lm" => TaskKind::CharLm,
            _ => bail!("unknown task kind '{s}'"),
        })
    }
}

/// Copy or reverse a random token string.
///
/// Sources draw content tokens from `FIRST_CONTENT..vocab_size`; targets
/// are the (reversed) source wrapped in BOS / EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqTask {
    pub reverse: bool,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SeqTask {
    pub fn copy(vocab_size: usize, min_len: usize, max_len: usize) -> Self {
        Self { reverse: false, vocab_size, min_len, max_len }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.vocab_size <= FIRST_CONTENT {
            bail!("vocab_size must leave room for content tokens after PAD/BOS/EOS");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            bail!("need 1 <= min_len <= max_len");
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, rows: usize) -> anyhow::Result<SeqBatch> {
        let mut sources = Vec::with_capacity(rows);
        let mut targets = Vec::with_capacity(rows);
        for _ in 0..rows {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_CONTENT..self.vocab_size)).collect();
            let mut tgt = Vec::with_capacity(len + 2);
            tgt.push(BOS);
            if self.reverse {
                tgt.extend(src.iter().rev());
            } else {
                tgt.extend(&src);
            }
            tgt.push(EOS);
            sources.push(src);
            targets.push(tgt);
        }
        Ok(SeqBatch::new(TokenBatch::from_rows(&sources, Some(PAD))?, TokenBatch::from_rows(&targets, Some(PAD))?)?)
    }

    /// Fixed evaluation batches from a stream offset from the training
    /// stream of `seed`.
    pub fn eval_set(&self, seed: u64, batches: usize, rows: usize) -> anyhow::Result<Vec<SeqBatch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        (0..batches).map(|_| self.sample(&mut rng, rows)).collect()
    }
}

/// Character-level corpus with a contiguous 90 / 5 / 5 split.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCorpus {
    alphabet: Vec<char>,
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

impl CharCorpus {
    pub fn from_text(text: &str) -> anyhow::Result<Self> {
        let alphabet: Vec<char> = text.chars().collect::<BTreeSet<_>>().into_iter().collect();
        if alphabet.is_empty() {
            bail!("corpus is empty");
        }
        let ids: Vec<usize> =
            text.chars().map(|c| alphabet.binary_search(&c).expect("char is in the alphabet")).collect();
        let n = ids.len();
        let (a, b) = (n * 90 / 100, n * 95 / 100);
        Ok(Self { alphabet, train: ids[..a].to_vec(), valid: ids[a..b].to_vec(), test: ids[b..].to_vec() })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
        Self::from_text(&text)
    }

    pub fn bundled() -> Self {
        Self::from_text(BUNDLED_CORPUS).expect("bundled corpus is not empty")
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn valid(&self) -> &[usize] {
        &self.valid
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    /// `rows` random windows of `len + 1` tokens from the training split.
    pub fn sample_train(&self, rng: &mut ChaCha8Rng, rows: usize, len: usize) -> anyhow::Result<TokenBatch> {
        if self.train.len() <= len + 1 {
            bail!("training split is shorter than one window");
        }
        let mut ids = Vec::with_capacity(rows * (len + 1));
        for _ in 0..rows {
            let start = rng.gen_range(0..self.train.len() - len);
            ids.extend_from_slice(&self.train[start..start + len + 1]);
        }
        Ok(TokenBatch::new(rows, len + 1, ids, None)?)
    }

    /// Consecutive windows of `len + 1` tokens over `split` that overlap by
    /// one token, so every token after the first is predicted exactly once
    /// (a trailing partial window is dropped). Grouped into batches of at
    /// most `rows` windows.
    pub fn eval_batches(split: &[usize], rows: usize, len: usize) -> anyhow::Result<Vec<TokenBatch>> {
        let windows: Vec<&[usize]> =
            (0..).map(|k| k * len).take_while(|&s| s + len < split.len()).map(|s| &split[s..s + len + 1]).collect();
        if windows.is_empty() {
            bail!("split is shorter than one window");
        }
        windows.chunks(rows).map(|group| Ok(TokenBatch::new(group.len(), len + 1, group.concat(), None)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_wrap_sources() {
        let task = SeqTask::copy(32, 5, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = task.sample(&mut rng, 8).unwrap();
        for r in 0..8 {
            let src: Vec<usize> = b.source.row(r).iter().copied().filter(|&t| t != PAD).collect();
            let tgt: Vec<usize> = b.target.row(r).iter().copied().filter(|&t| t != PAD).collect();
            assert!((5..=20).contains(&src.len()));
            assert!(src.iter().all(|&t| (FIRST_CONTENT..32).contains(&t)));
            assert_eq!(tgt[0], BOS);
            assert_eq!(*tgt.last().unwrap(), EOS);
            assert_eq!(&tgt[1..tgt.len() - 1], &src[..]);
        }
    }

    #[test]
    fn reverse_targets() {
        let task = SeqTask { reverse: true, ..SeqTask::copy(10, 3, 3) };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = task.sample(&mut rng, 1).unwrap();
        let s = b.source.row(0);
        assert_eq!(b.target.row(0), &[BOS, s[2], s[1], s[0], EOS]);
    }

    #[test]
    fn corpus_split_is_contiguous_and_complete() {
        let c =
            CharCorpus::from_text("abcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabc").unwrap();
        assert_eq!(c.vocab_size(), 3);
        assert_eq!(c.train().len() + c.valid().len() + c.test().len(), 72);
        assert_eq!(c.train().len(), 64);
    }

    #[test]
    fn eval_windows_cover_each_token_once() {
        let split: Vec<usize> = (0..23).collect();
        let batches = CharCorpus::eval_batches(&split, 2, 5).unwrap();
        let labels: Vec<usize> = batches.iter().flat_map(|b| b.labels().unwrap().ids().to_vec()).collect();
        assert_eq!(labels, (1..21).collect::<Vec<_>>());
    }

    #[test]
    fn bundled_corpus_loads() {
        let c = CharCorpus::bundled();
        assert!(c.vocab_size() > 50 && c.vocab_size() < 128);
        assert!(c.train().len() > 150_000);
    }
}
