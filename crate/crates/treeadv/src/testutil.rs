//! Hand-built and randomized forests for tests and verification suites.
//!
//! Kept in the library (not `#[cfg(test)]`) so integration and acceptance
//! tests can build the same structures.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::forest::{RolloutForest, RolloutTree, SegmentId, TokenId};

const EOS: TokenId = TokenId(9);

/// The three-leaf tree: a two-token shared root, two internal
/// nodes of one token each, and three one-token leaves.
///
/// Leaf order is `y1, y2, y3`. Every path ends exactly at the length cap
/// of 4 generated tokens, so the one-token leaves are valid terminations.
pub fn fig2_tree() -> RolloutForest {
    let mut tree = RolloutTree::new(vec![TokenId(0)], EOS, 4);
    let root = tree.root();
    tree.push_token(root, TokenId(1), -0.5, 0.3);
    tree.push_token(root, TokenId(2), -0.5, 1.6);
    let n_l = tree.add_child(root, TokenId(3), -0.7, 1.6).unwrap();
    let n_r = tree.add_child(root, TokenId(4), -0.9, 1.6).unwrap();
    tree.add_child(n_l, TokenId(5), -0.2, 0.1).unwrap();
    tree.add_child(n_r, TokenId(6), -0.3, 1.5).unwrap();
    tree.add_child(n_r, TokenId(7), -0.4, 1.5).unwrap();
    RolloutForest {
        trees: vec![tree],
        k: 3,
        m: 1,
        policy_hash: 0,
    }
}

/// Splits `quota` into `parts` positive integers, randomly.
fn split_quota(rng: &mut ChaCha8Rng, quota: usize, parts: usize) -> Vec<usize> {
    let mut out = vec![1usize; parts];
    for _ in 0..quota - parts {
        let i = rng.gen_range(0..parts);
        out[i] += 1;
    }
    out
}

fn grow_random(
    tree: &mut RolloutTree,
    seg: SegmentId,
    quota: usize,
    depth: usize,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) {
    let non_eos = |rng: &mut ChaCha8Rng| {
        let mut t = rng.gen_range(0..vocab_size as u16 - 1);
        if t == EOS.0 {
            t = vocab_size as u16 - 1;
        }
        TokenId(t)
    };
    for _ in 0..rng.gen_range(1..=3usize) {
        let t = non_eos(rng);
        tree.push_token(seg, t, -rng.gen_range(0.1..3.0), rng.gen_range(0.0..2.5));
    }
    if quota == 1 {
        if depth >= 5 || rng.gen_bool(0.7) {
            tree.push_token(seg, EOS, -rng.gen_range(0.1..3.0), rng.gen_range(0.0..2.5));
            return;
        }
        // Degenerate single-child chain.
        let t = non_eos(rng);
        let child = tree
            .add_child(seg, t, -rng.gen_range(0.1..3.0), rng.gen_range(0.0..2.5))
            .expect("fresh parent has no children");
        grow_random(tree, child, 1, depth + 1, vocab_size, rng);
        return;
    }
    let parts = rng.gen_range(2..=quota.min(3));
    let quotas = split_quota(rng, quota, parts);
    let mut firsts: Vec<u16> = (0..vocab_size as u16).filter(|&t| t != EOS.0).collect();
    firsts.shuffle(rng);
    for (i, q) in quotas.into_iter().enumerate() {
        let child = tree
            .add_child(
                seg,
                TokenId(firsts[i]),
                -rng.gen_range(0.1..3.0),
                rng.gen_range(0.0..2.5),
            )
            .expect("first tokens chosen distinct");
        grow_random(tree, child, q, depth + 1, vocab_size, rng);
    }
}

/// A completed random forest with exactly `k` leaves in `m` trees.
///
/// Requires `m | k`. Shapes, lengths, tokens, log-probs, and entropies are
/// all randomized from `seed`.
pub fn random_forest(seed: u64, k: usize, m: usize, vocab_size: usize) -> RolloutForest {
    assert!(m >= 1 && k % m == 0, "m must divide k");
    assert!(vocab_size > EOS.index() + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quota = k / m;
    let mut trees = Vec::with_capacity(m);
    for _ in 0..m {
        let prompt_len = rng.gen_range(1..=4usize);
        let prompt = (0..prompt_len)
            .map(|_| TokenId(rng.gen_range(0..vocab_size as u16)))
            .collect();
        let mut tree = RolloutTree::new(prompt, EOS, 4096);
        let root = tree.root();
        grow_random(&mut tree, root, quota, 0, vocab_size, &mut rng);
        debug_assert_eq!(tree.leaf_count(), quota);
        trees.push(tree);
    }
    RolloutForest {
        trees,
        k,
        m,
        policy_hash: 0,
    }
}

/// Random rewards in `[-1, 1]` for `k` leaves.
pub fn random_rewards(seed: u64, k: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
