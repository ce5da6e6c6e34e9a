//! Vocabulary, corpora and joint batch layout.
//!
//! A joint batch row is `src tokens, EOS, pad.. | BOS, tgt tokens, pad..`.
//! Positions restart at zero at the start of the target block, and the
//! language id is 0 over the source block and 1 over the target block. The
//! loss targets are the target tokens followed by EOS, aligned with the
//! target input block (teacher forcing).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::PadSide;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const LANG_SRC: usize = 0;
pub const LANG_TGT: usize = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size must be at least 5, got {0}")]
    VocabTooSmall(usize),
    #[error("malformed vocabulary: {0}")]
    BadVocab(String),
    #[error("pair {index}: {side} sentence is empty")]
    EmptySentence { index: usize, side: &'static str },
    #[error("invalid synthetic task config: {0}")]
    InvalidConfig(String),
    #[error("line count mismatch: source has {src} lines, target has {tgt}")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn from_text(source: &str, target: &str) -> Self {
        Self {
            source: tokenize(source),
            target: tokenize(target),
        }
    }
}

/// Whitespace tokenizer; also drops `\r` and surrounding blanks.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Shared source/target token table. Ids 0..4 are the specials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
            .collect();
        Self::try_from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = DataError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(DataError::VocabTooSmall(tokens.len()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(DataError::BadVocab(format!(
                    "id {i} must be {s}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::BadVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Joint vocabulary over both sides of the corpus. `max_size` counts the
/// four specials; the most frequent tokens fill the rest, ties broken
/// lexicographically.
pub fn build_vocab<'a, I>(corpus: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a SentencePair>,
{
    if max_size < 5 {
        return Err(DataError::VocabTooSmall(max_size));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut seen = false;
    for pair in corpus {
        seen = true;
        for t in pair.source.iter().chain(&pair.target) {
            if !SPECIALS.contains(&t.as_str()) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    if !seen || counts.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - SPECIALS.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Padded joint batch. All matrices are row-major over `B` rows.
///
/// Sources are left-padded by default so that every row's source ends at
/// column `S - 1`, directly before the target block. Under local windows
/// that cross the block boundary this keeps the source-to-target distances
/// independent of the other rows in the batch. Targets are right-padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointBatch {
    pub batch_size: usize,
    /// Source block extent `S` (longest source + EOS).
    pub source_len: usize,
    /// Target block extent `T` (longest target + BOS).
    pub target_len: usize,
    /// `B × (S+T)` token ids.
    pub tokens: Vec<usize>,
    /// `B × (S+T)` position ids, restarting at 0 at column `S`.
    pub positions: Vec<usize>,
    /// `B × (S+T)` language ids.
    pub lang: Vec<usize>,
    /// Real columns in each row's source block (tokens + EOS).
    pub src_lengths: Vec<usize>,
    /// Real columns in each row's target block (BOS + tokens).
    pub tgt_lengths: Vec<usize>,
    /// `B × T` next-token targets.
    pub loss_targets: Vec<usize>,
    /// `B × T`, true where `loss_targets` is not PAD.
    pub loss_mask: Vec<bool>,
    pub source_pad: PadSide,
}

impl JointBatch {
    /// Lays out already-encoded rows with left-padded sources. Targets may
    /// be empty (inference starts from BOS alone); sources may not.
    pub fn from_ids(rows: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        Self::from_ids_padded(rows, PadSide::Left)
    }

    /// Source padding on `source_pad`. Source positions count from 0 at the
    /// first real token; left padding columns get position 0.
    pub fn from_ids_padded(rows: &[(Vec<usize>, Vec<usize>)], source_pad: PadSide) -> Result<Self> {
        if rows.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        if let Some(index) = rows.iter().position(|(s, _)| s.is_empty()) {
            return Err(DataError::EmptySentence {
                index,
                side: "source",
            });
        }
        let b = rows.len();
        let s = rows.iter().map(|(src, _)| src.len()).max().unwrap() + 1;
        let t = rows.iter().map(|(_, tgt)| tgt.len()).max().unwrap() + 1;
        let n = s + t;
        let mut tokens = vec![PAD; b * n];
        let mut positions = Vec::with_capacity(b * n);
        let mut loss_targets = vec![PAD; b * t];
        let mut src_lengths = Vec::with_capacity(b);
        let mut tgt_lengths = Vec::with_capacity(b);
        for (r, (src, tgt)) in rows.iter().enumerate() {
            let row = &mut tokens[r * n..(r + 1) * n];
            let off = match source_pad {
                PadSide::Right => 0,
                PadSide::Left => s - src.len() - 1,
            };
            row[off..off + src.len()].copy_from_slice(src);
            row[off + src.len()] = EOS;
            positions.extend(std::iter::repeat_n(0, off));
            positions.extend((0..s - off).chain(0..t));
            row[s] = BOS;
            row[s + 1..s + 1 + tgt.len()].copy_from_slice(tgt);
            let lt = &mut loss_targets[r * t..(r + 1) * t];
            lt[..tgt.len()].copy_from_slice(tgt);
            lt[tgt.len()] = EOS;
            src_lengths.push(src.len() + 1);
            tgt_lengths.push(tgt.len() + 1);
        }
        let lang_row: Vec<usize> = std::iter::repeat_n(LANG_SRC, s)
            .chain(std::iter::repeat_n(LANG_TGT, t))
            .collect();
        let loss_mask = loss_targets.iter().map(|&id| id != PAD).collect();
        Ok(Self {
            batch_size: b,
            source_len: s,
            target_len: t,
            tokens,
            positions,
            lang: lang_row.repeat(b),
            src_lengths,
            tgt_lengths,
            loss_targets,
            loss_mask,
            source_pad,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.source_len + self.target_len
    }

    /// Number of target positions that contribute to the loss.
    pub fn target_token_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn make_joint_batch(pairs: &[SentencePair], vocab: &Vocabulary) -> Result<JointBatch> {
    if pairs.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        if p.source.is_empty() {
            return Err(DataError::EmptySentence {
                index,
                side: "source",
            });
        }
        if p.target.is_empty() {
            return Err(DataError::EmptySentence {
                index,
                side: "target",
            });
        }
        rows.push((vocab.encode(&p.source), vocab.encode(&p.target)));
    }
    JointBatch::from_ids(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    Sort,
}

impl std::str::FromStr for SyntheticTask {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "sort" => Ok(Self::Sort),
            other => Err(DataError::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

/// Random digit strings and their copy / reversal / ascending sort.
/// Symbols are the decimal numerals `0..vocab_size`.
pub fn gen_synthetic(
    task: SyntheticTask,
    vocab_size: usize,
    len_range: (usize, usize),
    n: usize,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    let (lo, hi) = len_range;
    if lo < 1 || hi < lo {
        return Err(DataError::InvalidConfig(format!(
            "length range ({lo}, {hi}) needs 1 <= lo <= hi"
        )));
    }
    if vocab_size < 2 {
        return Err(DataError::InvalidConfig(format!(
            "need at least 2 symbols, got {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
            let tgt = transduce(task, &src);
            SentencePair {
                source: src.iter().map(usize::to_string).collect(),
                target: tgt.iter().map(usize::to_string).collect(),
            }
        })
        .collect();
    Ok(pairs)
}

fn transduce(task: SyntheticTask, src: &[usize]) -> Vec<usize> {
    let mut out = src.to_vec();
    match task {
        SyntheticTask::Copy => {}
        SyntheticTask::Reverse => out.reverse(),
        SyntheticTask::Sort => out.sort_unstable(),
    }
    out
}

/// Aligned corpus read. Pairs with a blank side are skipped and counted.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub skipped_blank: usize,
}

pub fn read_parallel(src_path: &Path, tgt_path: &Path) -> Result<ParallelCorpus> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| DataError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let src = read(src_path)?;
    let tgt = read(tgt_path)?;
    let src_lines: Vec<&str> = src.lines().collect();
    let tgt_lines: Vec<&str> = tgt.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(DataError::LineCountMismatch {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    let mut skipped_blank = 0;
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let pair = SentencePair::from_text(s, t);
        if pair.source.is_empty() || pair.target.is_empty() {
            skipped_blank += 1;
        } else {
            pairs.push(pair);
        }
    }
    Ok(ParallelCorpus {
        pairs,
        skipped_blank,
    })
}

/// Splits off the trailing `fraction` of `pairs` (at least one pair) as a
/// held-out set.
pub fn split_holdout(mut pairs: Vec<SentencePair>, fraction: f64) -> (Vec<SentencePair>, Vec<SentencePair>) {
    let n = pairs.len();
    let k = ((n as f64 * fraction).round() as usize).max(1).min(n);
    let held = pairs.split_off(n - k);
    (pairs, held)
}

/// Epoch-shuffled batches of pair indices, deterministic per seed.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(n > 0 && batch_size > 0, "sampler needs data and a batch size");
        let mut s = Self {
            n,
            batch_size: batch_size.min(n),
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.n {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }
}
