//! Corpus BLEU over tokenized text, and token accuracy.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use thiserror::Error;

use crate::data::{make_joint_batch, SentencePair, Vocabulary};
use crate::inference::{greedy_decode, DecodeConfig};
use crate::masking::MaskCache;
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{hyp} hypotheses but {refs} references")]
    LengthMismatch { hyp: usize, refs: usize },
    #[error("empty corpus")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Score in `[0, 100]`.
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", p * 100.0)).collect();
        write!(
            f,
            "BLEU = {:.2} ({}, BP={:.3}, hyp={}, ref={})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with one reference per hypothesis: clipped n-gram
/// counts summed over the corpus for n = 1..4, geometric mean, brevity
/// penalty `exp(1 - ref/hyp)` when the hypotheses are shorter. No smoothing.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hyp: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Argmax token at every target column of `logits` (`B × (S+T) × V`),
/// flattened `B × T`.
pub fn argmax_predictions(logits: &Tensor, source_len: usize, target_len: usize) -> Vec<usize> {
    let s = logits.shape();
    let (b, n, v) = (s[0], s[1], s[2]);
    let data = logits.data();
    let mut out = Vec::with_capacity(b * target_len);
    for r in 0..b {
        for t in 0..target_len {
            let row = &data[((r * n) + source_len + t) * v..((r * n) + source_len + t + 1) * v];
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Fraction of counted target positions whose prediction equals the
/// target. `predictions` is `B × T`, aligned with `loss_targets`.
pub fn token_accuracy(predictions: &[usize], loss_targets: &[usize], loss_mask: &[bool]) -> f64 {
    let mut counted = 0usize;
    let mut correct = 0usize;
    for ((p, t), &m) in predictions.iter().zip(loss_targets).zip(loss_mask) {
        if m {
            counted += 1;
            correct += usize::from(p == t);
        }
    }
    if counted == 0 {
        0.0
    } else {
        correct as f64 / counted as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Teacher-forced token accuracy.
    pub token_accuracy: f64,
    /// BLEU of greedy decodes against the references.
    pub bleu: BleuReport,
    pub sentences: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "held-out: sentences={} token_accuracy={:.4} {}",
            self.sentences, self.token_accuracy, self.bleu
        )
    }
}

/// Teacher-forced accuracy plus greedy-decode BLEU on held-out pairs.
pub fn evaluate_heldout(model: &Model, vocab: &Vocabulary, pairs: &[SentencePair]) -> Result<EvalReport, ModelError> {
    let mut cache = MaskCache::new();
    let mut counted = 0usize;
    let mut correct = 0.0;
    for chunk in pairs.chunks(64) {
        let batch = make_joint_batch(chunk, vocab).map_err(|e| ModelError::Config(e.to_string()))?;
        let logits = model.logits(&mut cache, &batch)?;
        let preds = argmax_predictions(&logits, batch.source_len, batch.target_len);
        let n = batch.target_token_count();
        correct += token_accuracy(&preds, &batch.loss_targets, &batch.loss_mask) * n as f64;
        counted += n;
    }
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for p in pairs {
        let cfg = DecodeConfig::greedy(2 * p.source.len() + 10);
        hyps.push(greedy_decode(model, vocab, &p.source, &cfg)?);
        refs.push(p.target.clone());
    }
    let bleu = corpus_bleu(&hyps, &refs).map_err(|e| ModelError::Config(e.to_string()))?;
    Ok(EvalReport {
        token_accuracy: if counted == 0 { 0.0 } else { correct / counted as f64 },
        bleu,
        sentences: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn perfect_match_is_100() {
        let c = vec![toks("the cat sat on the mat"), toks("a b c d e")];
        let r = corpus_bleu(&c, &c).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.to_string(), "BLEU = 100.00 (100.0/100.0/100.0/100.0, BP=1.000, hyp=11, ref=11)");
    }

    #[test]
    fn clipped_unigram_precision() {
        let r = corpus_bleu(&[toks("the the the the the")], &[toks("the cat sat")]).unwrap();
        assert_eq!(r.matches[0], 1);
        assert_eq!(r.totals[0], 5);
        assert!((r.precisions[0] - 0.2).abs() < 1e-12);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn brevity_penalty_example() {
        let refs = vec![toks("a b c d e f g h i j")];
        let hyps = vec![toks("a b c d e f g")];
        let r = corpus_bleu(&hyps, &refs).unwrap();
        let bp = (1.0f64 - 10.0 / 7.0).exp();
        assert!((r.brevity_penalty - bp).abs() < 1e-12);
        assert!((r.brevity_penalty - 0.6514).abs() < 5e-5);
        assert!((r.bleu - 65.14).abs() < 5e-3);
    }

    #[test]
    fn length_mismatch() {
        let e = corpus_bleu(&[toks("a")], &[toks("a"), toks("b")]).unwrap_err();
        assert_eq!(e, EvalError::LengthMismatch { hyp: 1, refs: 2 });
    }

    #[test]
    fn accuracy_fractions() {
        let targets = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0, 0];
        let mask: Vec<bool> = targets.iter().map(|&t| t != 0).collect();
        assert_eq!(token_accuracy(&targets, &targets, &mask), 1.0);
        let wrong: Vec<usize> = targets.iter().map(|t| t + 100).collect();
        assert_eq!(token_accuracy(&wrong, &targets, &mask), 0.0);
        let mut half = targets.clone();
        for x in half.iter_mut().take(5) {
            *x += 100;
        }
        assert_eq!(token_accuracy(&half, &targets, &mask), 0.5);
    }
}
