#![allow(dead_code)]

use bjlm::data::JointBatch;
use bjlm::masking::{BoundaryPolicy, Window};
use bjlm::model::{Model, ModelConfig};
use rand::Rng;

/// Direct predicate: may query `q` attend to key `k`?
pub fn oracle_allows(q: usize, k: usize, s: usize, w: Window, policy: BoundaryPolicy) -> bool {
    let src_q = q < s;
    let src_k = k < s;
    match w {
        Window::Inf => {
            if src_q {
                src_k
            } else {
                k <= q
            }
        }
        Window::Finite(w) => {
            let half = (w - 1) / 2;
            if src_q {
                src_k && q.abs_diff(k) <= half
            } else if policy == BoundaryPolicy::ClipFullSource && src_k {
                true
            } else {
                k <= q && q - k < w
            }
        }
    }
}

/// Columns whose input can reach the output at `p` through the layer
/// stack, by backward breadth-first expansion over the band predicate.
pub fn reachable(p: usize, s: usize, n: usize, windows: &[Window], policy: BoundaryPolicy) -> Vec<bool> {
    let mut frontier = vec![false; n];
    frontier[p] = true;
    for &w in windows.iter().rev() {
        let mut next = frontier.clone();
        for q in 0..n {
            if frontier[q] {
                for (k, slot) in next.iter_mut().enumerate() {
                    if oracle_allows(q, k, s, w, policy) {
                        *slot = true;
                    }
                }
            }
        }
        frontier = next;
    }
    frontier
}

pub fn small_config(windows: Vec<Window>, vocab: usize, policy: BoundaryPolicy) -> ModelConfig {
    ModelConfig {
        n_layers: windows.len(),
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        vocab_size: vocab,
        windows,
        dropout: 0.0,
        max_positions: 64,
        tie_embeddings: true,
        boundary_policy: policy,
    }
}

pub fn random_model<R: Rng>(rng: &mut R, windows: Vec<Window>, policy: BoundaryPolicy) -> Model {
    Model::new(small_config(windows, 13, policy), rng.random()).unwrap()
}

/// One unpadded row with `s - 1` source tokens and `t - 1` target tokens.
pub fn random_row<R: Rng>(rng: &mut R, vocab: usize, s: usize, t: usize) -> JointBatch {
    let mut tok = |n: usize| (0..n).map(|_| rng.random_range(4..vocab)).collect::<Vec<_>>();
    JointBatch::from_ids(&[(tok(s - 1), tok(t - 1))]).unwrap()
}

/// Token id different from `id`, drawn from the non-special range.
pub fn other_token<R: Rng>(rng: &mut R, id: usize, vocab: usize) -> usize {
    loop {
        let c = rng.random_range(4..vocab);
        if c != id {
            return c;
        }
    }
}
