mod common;

use bjlm::checkpoint::{from_bytes, to_bytes};
use bjlm::data::{JointBatch, Vocabulary};
use bjlm::evaluation::corpus_bleu;
use bjlm::masking::{build_band_mask, build_padding_mask, combine, BandSpec, BoundaryPolicy, PadSide, Window};
use bjlm::model::{Model, Preset};
use bjlm::tensor::Tape;
use bjlm::training::{lr_at, smoothed_loss, Schedule, TrainConfig};
use common::oracle_allows;
use proptest::prelude::*;

fn window() -> impl Strategy<Value = Window> {
    prop_oneof![(0usize..8).prop_map(|h| Window::Finite(2 * h + 1)), Just(Window::Inf)]
}

fn policy() -> impl Strategy<Value = BoundaryPolicy> {
    prop_oneof![Just(BoundaryPolicy::Cross), Just(BoundaryPolicy::ClipFullSource)]
}

fn sentence() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 1..12)
}

proptest! {
    #[test]
    fn band_matches_predicate(s in 1usize..14, t in 0usize..14, w in window(), p in policy()) {
        let m = build_band_mask(BandSpec::new(w, s, t).with_policy(p)).unwrap();
        let n = s + t;
        for q in 0..n {
            for k in 0..n {
                prop_assert_eq!(m.data()[q * n + k], oracle_allows(q, k, s, w, p));
            }
        }
    }

    #[test]
    fn combined_rows_are_never_empty(
        rows in prop::collection::vec((1usize..6, 1usize..6), 1..4),
        w in window(),
        p in policy(),
        left in any::<bool>(),
    ) {
        let s = rows.iter().map(|r| r.0).max().unwrap();
        let t = rows.iter().map(|r| r.1).max().unwrap();
        let (sl, tl): (Vec<usize>, Vec<usize>) = rows.iter().copied().unzip();
        let side = if left { PadSide::Left } else { PadSide::Right };
        let band = build_band_mask(BandSpec::new(w, s, t).with_policy(p)).unwrap();
        let pad = build_padding_mask(&sl, &tl, s, t, side).unwrap();
        let c = combine(&band, &pad).unwrap();
        let n = s + t;
        for b in 0..rows.len() {
            for q in 0..n {
                let row = &c.data()[(b * n + q) * n..(b * n + q + 1) * n];
                prop_assert!(row[q]);
                if !pad.data()[b * n + q] {
                    prop_assert_eq!(row.iter().filter(|&&x| x).count(), 1);
                }
                for k in 0..n {
                    if row[k] && k != q {
                        prop_assert!(pad.data()[b * n + k]);
                    }
                }
            }
        }
    }

    #[test]
    fn bleu_of_identical_corpus_is_100(corpus in prop::collection::vec(sentence(), 1..6)) {
        let r = corpus_bleu(&corpus, &corpus).unwrap();
        let long_enough = corpus.iter().map(Vec::len).sum::<usize>() >= 4 && corpus.iter().any(|s| s.len() >= 4);
        if long_enough {
            prop_assert!((r.bleu - 100.0).abs() < 1e-9);
        }
        prop_assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn bleu_is_permutation_invariant(
        pairs in prop::collection::vec((sentence(), sentence()), 1..6),
        rot in 0usize..6,
    ) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let a = corpus_bleu(&h, &r).unwrap();
        let k = rot % pairs.len();
        let (mut h2, mut r2) = (h.clone(), r.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        let b = corpus_bleu(&h2, &r2).unwrap();
        prop_assert!((a.bleu - b.bleu).abs() < 1e-9);
        prop_assert_eq!(a.matches, b.matches);
    }

    #[test]
    fn corrupting_a_token_never_raises_bleu(
        corpus in prop::collection::vec(prop::collection::vec(0u8..6, 4..10), 1..5),
        which in any::<prop::sample::Index>(),
        pos in any::<prop::sample::Index>(),
    ) {
        let clean = corpus_bleu(&corpus, &corpus).unwrap();
        let mut bad = corpus.clone();
        let i = which.index(bad.len());
        let j = pos.index(bad[i].len());
        bad[i][j] = 99;
        let dirty = corpus_bleu(&bad, &corpus).unwrap();
        prop_assert!(dirty.bleu <= clean.bleu);
    }

    #[test]
    fn warmup_is_linear_and_continuous(warm in 1usize..5000, peak in 1e-5f64..1e-2, cosine in any::<bool>()) {
        let cfg = TrainConfig {
            warmup_steps: warm,
            peak_lr: peak,
            max_steps: warm * 3,
            schedule: if cosine { Schedule::Cosine } else { Schedule::InvSqrt },
            ..TrainConfig::default()
        };
        prop_assert!((lr_at(warm, &cfg) - peak).abs() < 1e-15);
        prop_assert!((lr_at(warm / 2 + 1, &cfg) - peak * (warm / 2 + 1) as f64 / warm as f64).abs() < 1e-15);
        let next = lr_at(warm + 1, &cfg);
        prop_assert!(next <= peak && peak - next < peak * 2.0 / warm as f64 + 1e-12);
    }

    #[test]
    fn unsmoothed_loss_is_cross_entropy(
        logits in prop::collection::vec(-5.0f64..5.0, 2 * 5 * 7),
        targets in prop::collection::vec(4usize..7, 2),
    ) {
        // One row: source [4], target tokens `targets`.
        let batch = JointBatch::from_ids(&[(vec![4], targets.clone())]).unwrap();
        let (s, t, v) = (batch.source_len, batch.target_len, 7);
        let n = s + t;
        let logits = &logits[..n * v];
        let mut tape = Tape::new();
        let x = tape.constant(&[1, n, v], logits.to_vec()).unwrap();
        let (loss, count) = smoothed_loss(&mut tape, x, &batch, 0.0).unwrap();
        let mut want = 0.0;
        for j in 0..t {
            let row = &logits[(s + j) * v..(s + j + 1) * v];
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            want += lse - row[batch.loss_targets[j]];
        }
        want /= count as f64;
        prop_assert!((tape.value(loss)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn smoothed_loss_bounded_by_target_entropy(logits in prop::collection::vec(-3.0f64..3.0, 5), eps in 0.01f64..0.5) {
        // V = 5, one scored position.
        let batch = JointBatch::from_ids(&[(vec![4], vec![])]).unwrap();
        let n = batch.seq_len();
        let mut data = vec![0.0; n * 5];
        data[batch.source_len * 5..(batch.source_len + 1) * 5].copy_from_slice(&logits);
        let mut tape = Tape::new();
        let x = tape.constant(&[1, n, 5], data).unwrap();
        let (loss, _) = smoothed_loss(&mut tape, x, &batch, eps).unwrap();
        let target: Vec<f64> = (0..5).map(|k| eps / 5.0 + if k == 2 { 1.0 - eps } else { 0.0 }).collect();
        let entropy: f64 = -target.iter().map(|p| p * p.ln()).sum::<f64>();
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        let direct: f64 = -target.iter().zip(&logits).map(|(p, z)| p * (z - lse)).sum::<f64>();
        prop_assert!((tape.value(loss)[0] - direct).abs() < 1e-12);
        prop_assert!(tape.value(loss)[0] >= entropy - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), untied in any::<bool>()) {
        let mut cfg = Preset::ToyMini.config(13);
        cfg.tie_embeddings = !untied;
        let model = Model::new(cfg, seed).unwrap();
        let vocab = Vocabulary::from_tokens((0..9).map(|i| format!("t{i}"))).unwrap();
        let bytes = to_bytes(&model, &vocab);
        let (m2, v2) = from_bytes(&bytes).unwrap();
        prop_assert_eq!(to_bytes(&m2, &v2), bytes);
    }

    #[test]
    fn vocabulary_round_trip(words in prop::collection::btree_set("[a-z]{1,6}", 1..20)) {
        let vocab = Vocabulary::from_tokens(words.iter().cloned()).unwrap();
        let toks: Vec<String> = words.iter().cloned().collect();
        prop_assert_eq!(vocab.decode(&vocab.encode(&toks)), toks);
    }
}
