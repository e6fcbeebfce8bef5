//! Entropy-guided forest growth under the behavior policy.
//!
//! Rollouts proceed linearly under a frozen policy snapshot; positions whose
//! truncated entropy exceeds the threshold tau become branch points, gated by
//! the no-branch token list, the earliest-branching (delimiter arming)
//! constraint, and the remaining leaf budget. A tree that terminates below
//! its quota is topped up with independent linear rollouts restarted from
//! the root.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{RolloutForest, RolloutTree, SegmentId, TokenId};
use crate::policy::PolicySnapshot;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealCadence {
    PerEpoch,
    PerStep,
}

/// Branching configuration, including the annealed entropy threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchPolicy {
    /// Current entropy threshold tau, in nats.
    pub tau: f64,
    pub tau_init: f64,
    pub tau_floor: f64,
    pub tau_decrement: f64,
    pub anneal_cadence: AnnealCadence,
    /// Number of children spawned at a branch point; must be >= 2.
    pub branch_factor: usize,
    pub no_branch_tokens: BTreeSet<TokenId>,
    pub delimiter_tokens: BTreeSet<TokenId>,
    /// Truncation width for entropy estimation and sampling.
    pub top_k: usize,
    /// Nucleus mass for sampling; entropy is computed pre-nucleus.
    pub top_p: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid truncated distribution: {0}")]
    InvalidDistribution(String),
    #[error("leaf budget infeasible: quota {quota}, trees {trees}")]
    BudgetInfeasible { quota: usize, trees: usize },
}

/// Entropy over the given truncated support only: `-sum p ln p`, with tokens
/// outside the support contributing zero.
pub fn truncated_entropy(topk_probs: &[f64]) -> Result<f64, SamplerError> {
    let mut sum = 0.0;
    for &p in topk_probs {
        if p <= 0.0 {
            return Err(SamplerError::InvalidDistribution(format!(
                "probability {p} is not positive"
            )));
        }
        sum += p;
    }
    if sum > 1.0 + 1e-9 {
        return Err(SamplerError::InvalidDistribution(format!(
            "probabilities sum to {sum} > 1"
        )));
    }
    Ok(topk_probs.iter().map(|&p| -p * p.ln()).sum())
}

/// The branch predicate: entropy strictly above tau, token outside the
/// no-branch list, path armed by a delimiter, and enough leaf budget to pay
/// for `branch_factor - 1` extra leaves.
pub fn should_branch(
    entropy: f64,
    next_token: TokenId,
    armed: bool,
    policy: &BranchPolicy,
    tree_budget_remaining: usize,
) -> bool {
    entropy > policy.tau
        && !policy.no_branch_tokens.contains(&next_token)
        && armed
        && tree_budget_remaining >= policy.branch_factor - 1
}

/// Threshold after `event_count` anneal events:
/// `tau = max(floor, init - decrement * events)`.
pub fn anneal(policy: &BranchPolicy, event_count: usize) -> BranchPolicy {
    let tau = (policy.tau_init - policy.tau_decrement * event_count as f64).max(policy.tau_floor);
    BranchPolicy {
        tau,
        ..policy.clone()
    }
}

/// Behavior-distribution statistics at one generation step.
struct StepDistribution {
    /// Truncated entropy over the top-k support, pre-nucleus.
    entropy: f64,
    /// Sampling support after nucleus then top-k filtering, renormalized,
    /// ordered by probability descending (token id ascending on ties).
    filtered: Vec<(TokenId, f64)>,
}

fn analyze(probs: &[f64], top_k: usize, top_p: f64) -> Result<StepDistribution, SamplerError> {
    let mut sorted: Vec<(TokenId, f64)> = probs
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > 0.0)
        .map(|(i, &p)| (TokenId(i as u16), p))
        .collect();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let k = top_k.min(sorted.len());
    let topk_probs: Vec<f64> = sorted[..k].iter().map(|&(_, p)| p).collect();
    let entropy = truncated_entropy(&topk_probs)?;

    // Nucleus first, then top-k truncation; both are prefixes of the sorted
    // order, so the result is the shorter prefix.
    let mut nucleus_len = sorted.len();
    let mut acc = 0.0;
    for (i, &(_, p)) in sorted.iter().enumerate() {
        acc += p;
        if acc >= top_p {
            nucleus_len = i + 1;
            break;
        }
    }
    let support = nucleus_len.min(k);
    let mut filtered: Vec<(TokenId, f64)> = sorted[..support].to_vec();
    let mass: f64 = filtered.iter().map(|&(_, p)| p).sum();
    for entry in &mut filtered {
        entry.1 /= mass;
    }
    Ok(StepDistribution { entropy, filtered })
}

/// Draws one entry index by inverse-CDF over the (normalized) weights.
fn draw(entries: &[(TokenId, f64)], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = entries.iter().map(|&(_, p)| p).sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &(_, p)) in entries.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    entries.len() - 1
}

struct Grower<'a> {
    policy: &'a PolicySnapshot,
    branch: &'a BranchPolicy,
    quota: usize,
    eos: TokenId,
    cap: usize,
    rng: ChaCha8Rng,
    planned_leaves: usize,
    path: Vec<TokenId>,
}

impl<'a> Grower<'a> {
    fn prefix(&self, tree: &RolloutTree) -> Vec<TokenId> {
        let mut p = tree.prompt.clone();
        p.extend(&self.path);
        p
    }

    /// Extends `seg` token by token, branching where permitted. The caller is
    /// responsible for truncating `self.path` back after the call.
    fn grow_path(
        &mut self,
        tree: &mut RolloutTree,
        seg: SegmentId,
        mut armed: bool,
        allow_branch: bool,
    ) -> Result<(), SamplerError> {
        loop {
            if tree.segment(seg).end_offset() >= self.cap {
                return Ok(());
            }
            let probs = self.policy.distribution(&self.prefix(tree));
            let sd = analyze(&probs, self.branch.top_k, self.branch.top_p)?;
            let idx = draw(&sd.filtered, &mut self.rng);
            let token = sd.filtered[idx].0;

            // Never branch at the very first generated token: an empty shared
            // prefix saves nothing and the earliest-branching constraint
            // requires some generated context first.
            let branch_now = allow_branch
                && !self.path.is_empty()
                && sd.filtered.len() >= self.branch.branch_factor
                && should_branch(
                    sd.entropy,
                    token,
                    armed,
                    self.branch,
                    self.quota - self.planned_leaves,
                );

            if !branch_now {
                tree.push_token(seg, token, probs[token.index()].ln(), sd.entropy);
                self.path.push(token);
                if self.branch.delimiter_tokens.contains(&token) {
                    armed = true;
                }
                if token == self.eos {
                    return Ok(());
                }
                continue;
            }

            // Branch: the sampled token becomes the first child; the other
            // children are drawn without replacement from the same filtered
            // distribution.
            self.planned_leaves += self.branch.branch_factor - 1;
            let mut remaining = sd.filtered.clone();
            remaining.remove(idx);
            let mut child_tokens = vec![token];
            for _ in 1..self.branch.branch_factor {
                let j = draw(&remaining, &mut self.rng);
                child_tokens.push(remaining.remove(j).0);
            }
            for child_token in child_tokens {
                let child = tree
                    .add_child(seg, child_token, probs[child_token.index()].ln(), sd.entropy)
                    .expect("branch children are drawn without replacement");
                let saved = self.path.len();
                self.path.push(child_token);
                // A fresh branch is disarmed until its own delimiter.
                let child_armed = self.branch.delimiter_tokens.contains(&child_token);
                if child_token != self.eos && tree.segment(child).end_offset() < self.cap {
                    self.grow_path(tree, child, child_armed, allow_branch)?;
                }
                self.path.truncate(saved);
            }
            return Ok(());
        }
    }
}

/// Grows one tree to exactly `quota` leaves.
pub fn grow_tree(
    prompt: &[TokenId],
    policy: &PolicySnapshot,
    branch_policy: &BranchPolicy,
    quota: usize,
    seed: u64,
    eos: TokenId,
    length_cap: usize,
) -> Result<RolloutTree, SamplerError> {
    if quota < 1 {
        return Err(SamplerError::BudgetInfeasible { quota, trees: 1 });
    }
    let mut tree = RolloutTree::new(prompt.to_vec(), eos, length_cap);
    let mut grower = Grower {
        policy,
        branch: branch_policy,
        quota,
        eos,
        cap: length_cap,
        rng: ChaCha8Rng::seed_from_u64(seed),
        planned_leaves: 1,
        path: Vec::new(),
    };
    // The prompt ends with (or contains) a delimiter in every task family,
    // which arms the initial path; arming is otherwise earned by emitting a
    // delimiter and lost at each branch.
    let prompt_armed = prompt
        .iter()
        .any(|t| branch_policy.delimiter_tokens.contains(t));
    let root = tree.root();
    grower.grow_path(&mut tree, root, prompt_armed, true)?;
    grower.path.clear();

    // Quota shortfall: independent linear rollouts restarted from the root.
    while tree.leaf_count() < quota {
        tree.interpose_synthetic_root();
        let root = tree.root();
        let probs = policy.distribution(&grower.prefix(&tree));
        let sd = analyze(&probs, branch_policy.top_k, branch_policy.top_p)?;
        let idx = draw(&sd.filtered, &mut grower.rng);
        let token = sd.filtered[idx].0;
        let seg = tree.attach_restart(root, token, probs[token.index()].ln(), sd.entropy);
        grower.path.push(token);
        if token != eos && tree.segment(seg).end_offset() < length_cap {
            let armed = branch_policy.delimiter_tokens.contains(&token);
            grower.grow_path(&mut tree, seg, armed, false)?;
        }
        grower.path.clear();
    }
    Ok(tree)
}

/// Grows `m` trees of `k / m` leaves each, with per-tree sub-seeds derived
/// from `(seed, tree_index)` so tree growth order cannot affect results.
pub fn sample_forest(
    prompt: &[TokenId],
    policy: &PolicySnapshot,
    branch_policy: &BranchPolicy,
    k: usize,
    m: usize,
    seed: u64,
    eos: TokenId,
    length_cap: usize,
) -> Result<RolloutForest, SamplerError> {
    if m < 1 || k % m != 0 {
        return Err(SamplerError::BudgetInfeasible { quota: k, trees: m });
    }
    let quota = k / m;
    let mut trees = Vec::with_capacity(m);
    for tree_index in 0..m {
        let sub_seed = derive_seed(seed, tree_index as u64);
        trees.push(grow_tree(
            prompt,
            policy,
            branch_policy,
            quota,
            sub_seed,
            eos,
            length_cap,
        )?);
    }
    Ok(RolloutForest {
        trees,
        k,
        m,
        policy_hash: policy.content_hash(),
    })
}

/// splitmix64 mix of a base seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
