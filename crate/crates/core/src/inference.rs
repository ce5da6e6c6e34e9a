//! Autoregressive decoding with the source sentence as the prefix.
//!
//! Every step re-runs the full forward pass over `source ++ EOS ++ BOS ++
//! generated` with masks rebuilt for the grown target block. No key/value
//! caching.

use serde::{Deserialize, Serialize};

use crate::data::{JointBatch, Vocabulary, EOS};
use crate::masking::MaskCache;
use crate::model::{Model, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// 1 selects greedy decoding.
    pub beam_size: usize,
    /// Exponent α of the `((5 + len) / 6)^α` length normalizer.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            beam_size: 5,
            length_penalty: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            beam_size: 1,
            length_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam_size < 1 || self.max_new_tokens < 1 || !(self.length_penalty >= 0.0) {
            return Err(ModelError::Config(format!(
                "decode needs beam_size >= 1, max_new_tokens >= 1, alpha >= 0; got {self:?}"
            )));
        }
        Ok(())
    }

    fn normalizer(&self, len: usize) -> f64 {
        ((5.0 + len as f64) / 6.0).powf(self.length_penalty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids; ends with EOS when the model emitted one.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Log-probabilities of the next token given the generated prefix.
pub trait NextTokenScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError>;
}

/// Scores continuations with a model, conditioned on a fixed source.
pub struct ModelScorer<'m> {
    model: &'m Model,
    source: Vec<usize>,
    cache: MaskCache,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, source: Vec<usize>) -> Self {
        Self {
            model,
            source,
            cache: MaskCache::new(),
        }
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let batch = JointBatch::from_ids(&[(self.source.clone(), prefix.to_vec())])
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let logits = self.model.logits(&mut self.cache, &batch)?;
        let v = self.model.config.vocab_size;
        let last = batch.source_len + prefix.len();
        Ok(log_softmax(&logits.data()[last * v..(last + 1) * v]))
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Argmax continuation, lowest id on ties. Stops after EOS or
/// `max_new_tokens` tokens; the returned ids exclude EOS.
pub fn greedy_search(scorer: &mut dyn NextTokenScorer, max_new_tokens: usize) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::new();
    while out.len() < max_new_tokens {
        let lp = scorer.next_log_probs(&out)?;
        let best = argmax(&lp);
        if best == EOS {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Beam search over continuations.
///
/// Each step keeps the `beam_size` best extensions by cumulative
/// log-probability (ties: earlier beam, then lower id). Extensions ending in
/// EOS, or reaching `max_new_tokens`, move to the finished pool. Search stops
/// once no live hypothesis can still beat the best finished score under the
/// length normalizer.
pub fn beam_search(scorer: &mut dyn NextTokenScorer, cfg: &DecodeConfig) -> Result<Hypothesis, ModelError> {
    cfg.validate()?;
    let score = |h: &Hypothesis| h.log_prob / cfg.normalizer(h.tokens.len());
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 1..=cfg.max_new_tokens {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let lp = scorer.next_log_probs(&h.tokens)?;
            candidates.extend(lp.iter().enumerate().map(|(tok, &l)| (h.log_prob + l, hi, tok)));
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cfg.beam_size);
        for (log_prob, hi, tok) in candidates {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let done = tok == EOS || step == cfg.max_new_tokens;
            let h = Hypothesis {
                tokens,
                log_prob,
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        let best_finished = finished.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
        let best_possible = live
            .iter()
            .map(|h| h.log_prob / cfg.normalizer(cfg.max_new_tokens))
            .fold(f64::NEG_INFINITY, f64::max);
        if best_finished >= best_possible {
            break;
        }
    }

    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| score(&h) > score(b)) {
            best = Some(h);
        }
    }
    Ok(best.expect("the length cap always finishes hypotheses"))
}

pub fn greedy_decode<S: AsRef<str>>(
    model: &Model,
    vocab: &Vocabulary,
    source: &[S],
    cfg: &DecodeConfig,
) -> Result<Vec<String>, ModelError> {
    cfg.validate()?;
    let mut scorer = ModelScorer::new(model, vocab.encode(source));
    let ids = greedy_search(&mut scorer, cfg.max_new_tokens)?;
    Ok(vocab.decode(&ids))
}

pub fn beam_decode<S: AsRef<str>>(
    model: &Model,
    vocab: &Vocabulary,
    source: &[S],
    cfg: &DecodeConfig,
) -> Result<Hypothesis, ModelError> {
    let mut scorer = ModelScorer::new(model, vocab.encode(source));
    beam_search(&mut scorer, cfg)
}

/// Greedy when `beam_size == 1`, beam search otherwise.
pub fn translate<S: AsRef<str>>(
    model: &Model,
    vocab: &Vocabulary,
    source: &[S],
    cfg: &DecodeConfig,
) -> Result<Vec<String>, ModelError> {
    if source.is_empty() {
        return Ok(Vec::new());
    }
    if cfg.beam_size == 1 {
        greedy_decode(model, vocab, source, cfg)
    } else {
        let h = beam_decode(model, vocab, source, cfg)?;
        Ok(vocab.decode(h.output()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table keyed by prefix.
    struct Table {
        v: usize,
        rows: Vec<(Vec<usize>, Vec<f64>)>,
    }

    impl NextTokenScorer for Table {
        fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
            for (p, probs) in &self.rows {
                if p == prefix {
                    return Ok(probs.iter().map(|x| x.ln()).collect());
                }
            }
            let mut uniform = vec![1e-9; self.v];
            uniform[EOS] = 1.0;
            Ok(uniform.iter().map(|x: &f64| x.ln()).collect())
        }
    }

    // Ids: 0..4 specials, a = 4, b = 5.
    fn crafted() -> Table {
        let p = |a: f64, b: f64, end: f64| {
            let mut v = vec![0.0; 6];
            v[4] = a;
            v[5] = b;
            v[EOS] = end;
            v
        };
        Table {
            v: 6,
            rows: vec![
                (vec![], p(0.6, 0.4, 0.0)),
                (vec![4], p(0.45, 0.45, 0.1)),
                (vec![5], p(0.05, 0.05, 0.9)),
            ],
        }
    }

    #[test]
    fn beam_beats_greedy_on_crafted_distribution() {
        let mut t = crafted();
        let greedy = greedy_search(&mut t, 2).unwrap();
        assert_eq!(greedy[0], 4);
        let cfg = DecodeConfig {
            max_new_tokens: 2,
            beam_size: 2,
            length_penalty: 0.0,
        };
        let best = beam_search(&mut t, &cfg).unwrap();
        assert_eq!(best.tokens, vec![5, EOS]);
        assert_eq!(best.output(), &[5]);
        assert!((best.log_prob - 0.36f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn capped_hypotheses_are_returned() {
        // EOS never wins; both steps hit the cap.
        let mut t = Table {
            v: 6,
            rows: vec![
                (vec![], vec![0.0, 0.0, 0.01, 0.0, 0.7, 0.29]),
                (vec![4], vec![0.0, 0.0, 0.01, 0.0, 0.2, 0.79]),
                (vec![5], vec![0.0, 0.0, 0.01, 0.0, 0.5, 0.49]),
            ],
        };
        let cfg = DecodeConfig {
            max_new_tokens: 2,
            beam_size: 2,
            length_penalty: 0.0,
        };
        let best = beam_search(&mut t, &cfg).unwrap();
        assert_eq!(best.tokens, vec![4, 5]);
        assert!(best.finished);
    }

    #[test]
    fn greedy_respects_cap() {
        let mut t = Table {
            v: 6,
            rows: vec![],
        };
        // Always-EOS fallback: empty output.
        assert!(greedy_search(&mut t, 5).unwrap().is_empty());
        struct Loop;
        impl NextTokenScorer for Loop {
            fn next_log_probs(&mut self, _: &[usize]) -> Result<Vec<f64>, ModelError> {
                Ok(vec![-5.0, -5.0, -5.0, -5.0, -0.1])
            }
        }
        assert_eq!(greedy_search(&mut Loop, 3).unwrap(), vec![4, 4, 4]);
    }

    #[test]
    fn length_normalizer() {
        let c = DecodeConfig {
            max_new_tokens: 4,
            beam_size: 2,
            length_penalty: 1.0,
        };
        assert!((c.normalizer(1) - 1.0).abs() < 1e-15);
        assert!((c.normalizer(7) - 2.0).abs() < 1e-15);
        assert!(DecodeConfig { beam_size: 0, ..c }.validate().is_err());
    }
}
